//! One pass/fail line per acceptance criterion, written straight to stderr so
//! it shows up without `--nocapture`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cbrl::experiments::{self, RunOptions};
use cbrl::policy::{init_policy, logprobs, PolicyConfig, PolicyParams, SeqBatch};
use cbrl::prompting::{self, RewardSpec};
use cbrl::rl::{self, Algorithm, Rollout, RlConfig};
use cbrl::rng::RngStream;
use cbrl::schedule::{draw_injection, injection_probability, ScheduleParams};
use cbrl::tasks::{self, TaskConfig, TaskData, TaskKind};
use cbrl::trainer::{train, TrainConfig, Trainer};
use num_rational::Rational64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let (pass, detail) = match res {
        Ok(o) => (o.pass && took <= limit, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "ACCEPTANCE {} {name}: {detail}; {:.1}s (limit {}s)",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn schedule_exactness() -> Outcome {
    let oracle = |t: usize, a: f64, b: f64, n: usize| -> f64 {
        if n == 1 {
            a
        } else {
            a + (t as f64 - 1.0) / (n as f64 - 1.0) * (b - a)
        }
    };
    let mut rng = RngStream::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (a, b) = (rng.uniform(), rng.uniform());
        let n = 2 + rng.below(1000);
        let p = ScheduleParams::new(a, b, n).unwrap();
        let mut ts = vec![1, n];
        ts.extend((0..100).map(|_| 1 + rng.below(n)));
        for t in ts {
            worst = worst.max((injection_probability(t, &p).unwrap() - oracle(t, a, b, n)).abs());
        }
        assert_eq!(injection_probability(1, &p).unwrap(), a);
        assert!((injection_probability(n, &p).unwrap() - b).abs() <= 1e-12);
    }
    let single = ScheduleParams::new(0.37, 0.0, 1).unwrap();
    let t1 = injection_probability(1, &single).unwrap() == 0.37;
    outcome(worst <= 1e-12 && t1, format!("max abs error {worst:.2e}, T=1 returns p_start: {t1}"))
}

fn injection_statistics() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, p) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let mut rng = RngStream::derive(42, &[i as u64]);
        let hits = (0..10_000).filter(|_| draw_injection(p, &mut rng)).count();
        let rate = hits as f64 / 10_000.0;
        let band = 3.0 * (p * (1.0 - p) / 10_000.0f64).sqrt();
        ok &= (rate - p).abs() <= band;
        parts.push(format!("p={p}: {rate:.4}"));
    }
    let mut c = TrainConfig::default();
    c.policy = PolicyConfig {
        d_model: 16,
        layers: 1,
        heads: 1,
        context: 256,
    };
    c.system_prompt = prompting::SHORT_SYSTEM_PROMPT.to_string();
    c.task_config.spell_backward.max_word_len = 5;
    c.schedule = ScheduleParams::new(1.0, 0.0, 300).unwrap();
    c.batch_size = 16;
    c.rl.group_size = 2;
    c.sampling.max_new_tokens = 1;
    c.eval.every = 0;
    c.record_timing = false;
    let r = train(c).unwrap();
    let xs: Vec<f64> = r.metrics.iter().map(|m| m.p_inject).collect();
    let ys: Vec<f64> = r.metrics.iter().map(|m| m.frac_injected).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    ok &= (slope - 1.0).abs() < 0.1;
    parts.push(format!("frac_injected slope {slope:.3}"));
    outcome(ok, parts.join(", "))
}

fn advantage_identities() -> Outcome {
    let mut rng = RngStream::new(7);
    let mut worst_sum: f64 = 0.0;
    let mut shift_exact = true;
    let mut affine_ok = true;
    for i in 0..1000 {
        let n = [2, 4, 8][i % 3];
        let r: Vec<f64> = (0..n).map(|_| rng.range_inclusive(-2048, 2048) as f64 / 1024.0).collect();
        let g = rl::grpo_advantages(&r).unwrap();
        let l = rl::rloo_advantages(&r).unwrap();
        worst_sum = worst_sum.max(g.iter().sum::<f64>().abs()).max(l.iter().sum::<f64>().abs());
        let c = rng.range_inclusive(-4096, 4096) as f64 / 1024.0;
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        shift_exact &= rl::rloo_advantages(&shifted).unwrap() == l;
        let (a, b) = (0.1 + 9.9 * rng.uniform(), 10.0 * rng.uniform() - 5.0);
        let moved = rl::grpo_advantages(&r.iter().map(|x| a * x + b).collect::<Vec<_>>()).unwrap();
        let mean = r.iter().sum::<f64>() / n as f64;
        let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for (x, y) in g.iter().zip(&moved) {
            let slack = if sd > 0.0 { 3e-6 * (1.0 - 1.0 / a).abs() / sd * (1.0 + x.abs()) } else { 0.0 };
            affine_ok &= (x - y).abs() <= slack + 1e-9;
        }
    }
    let l = rl::rloo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
    let g = rl::grpo_advantages(&[1.2, 0.2, 0.2, 0.2]).unwrap();
    let near = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-3);
    let ex = near(&l, &[1.0, -1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]) && near(&g, &[1.732, -0.577, -0.577, -0.577]);
    outcome(
        worst_sum <= 1e-9 && shift_exact && affine_ok && ex,
        format!(
            "max |sum| {worst_sum:.1e}, rloo shift exact {shift_exact}, grpo affine {affine_ok}, worked examples {ex}"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let cfg = PolicyConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        context: 64,
    };
    let noisy = |seed: u64| -> PolicyParams<f64> {
        let mut p = init_policy::<f64>(seed, cfg).unwrap();
        let mut rng = RngStream::new(seed + 100);
        p.data.iter_mut().for_each(|x| *x += 0.4 * (rng.uniform() - 0.5));
        p
    };
    let (p, reference, behavior) = (noisy(1), noisy(2), noisy(3));
    let mut rng = RngStream::new(9);
    let mut rollouts = Vec::new();
    for g in 0..2 {
        let prompt: Vec<u32> = (0..5).map(|_| 12 + rng.below(90) as u32).collect();
        for i in 0..4 {
            let resp: Vec<u32> = (0..2 + i % 3).map(|_| 12 + rng.below(90) as u32).collect();
            let (b, t) = SeqBatch::shared_prefix(&prompt, &[&resp]);
            let lp = logprobs(&behavior, &b, &t[0]).unwrap();
            rollouts.push(Rollout {
                prompt_tokens: prompt.clone(),
                behavior_logprobs: lp.iter().map(|&x| x as f32).collect(),
                response_tokens: resp,
                reward: [1.2, 0.2, 0.0, 0.2][(i + g) % 4],
                injected: false,
                group_id: g,
            });
        }
    }
    let rc = RlConfig {
        group_size: 4,
        kl_coef: 0.05,
        entropy_coef: 0.01,
        ..RlConfig::default()
    };
    let (_, grad) = rl::surrogate_loss_and_grad(&p, &rollouts, &reference, &rc).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 50 {
        let i = rng.below(p.len());
        let h = 1e-5;
        let mut q = p.clone();
        q.data[i] += h;
        let up = rl::surrogate_loss_and_grad(&q, &rollouts, &reference, &rc).unwrap().0;
        q.data[i] -= 2.0 * h;
        let down = rl::surrogate_loss_and_grad(&q, &rollouts, &reference, &rc).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((fd - grad[i]).abs() / scale);
        checked += 1;
    }
    outcome(worst < 1e-3, format!("{checked} coordinates, max relative error {worst:.2e}"))
}

fn insertion_sort(words: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in words {
        let key: Vec<u32> = w.chars().map(|c| c as u32).collect();
        let at = out
            .iter()
            .position(|o| o.chars().map(|c| c as u32).collect::<Vec<_>>() > key)
            .unwrap_or(out.len());
        out.insert(at, w.clone());
    }
    out
}

/// Every ordering, operator triple and bracketing of four numbers.
fn solvable(nums: [i64; 4]) -> bool {
    fn apply(a: Option<Rational64>, b: Option<Rational64>, op: u8) -> Option<Rational64> {
        let (a, b) = (a?, b?);
        match op {
            0 => Some(a + b),
            1 => Some(a - b),
            2 => Some(a * b),
            _ => (b != Rational64::from_integer(0)).then(|| a / b),
        }
    }
    let target = Some(Rational64::from_integer(24));
    let idx = [0usize, 1, 2, 3];
    let mut perms = Vec::new();
    for &a in &idx {
        for &b in &idx {
            for &c in &idx {
                for &d in &idx {
                    let p = [a, b, c, d];
                    if (0..4).all(|i| p.contains(&i)) {
                        perms.push(p);
                    }
                }
            }
        }
    }
    for p in perms {
        let [a, b, c, d] = p.map(|i| Some(Rational64::from_integer(nums[i])));
        for o in 0..64u8 {
            let (x, y, z) = (o & 3, (o >> 2) & 3, (o >> 4) & 3);
            let shapes = [
                apply(apply(apply(a, b, x), c, y), d, z),
                apply(apply(a, apply(b, c, x), y), d, z),
                apply(apply(a, b, x), apply(c, d, y), z),
                apply(a, apply(apply(b, c, x), d, y), z),
                apply(a, apply(b, apply(c, d, x), y), z),
            ];
            if shapes.contains(&target) {
                return true;
            }
        }
    }
    false
}

fn verifier_oracles() -> Outcome {
    let cfg = TaskConfig::default();
    let mut agree = 0;
    for seed in 0..1000u64 {
        let data = tasks::generate_data(TaskKind::WordSorting, seed, &cfg).unwrap();
        let TaskData::WordSorting { words } = &data else { unreachable!() };
        let inst = tasks::instance_from_data(seed, &data).unwrap();
        let sorted = insertion_sort(words);
        let good = tasks::verify(&inst, &sorted.join(", ")) == 1.0;
        let mut swapped = sorted.clone();
        swapped.reverse();
        let bad_ok = swapped == sorted || tasks::verify(&inst, &swapped.join(", ")) == 0.0;
        if good && bad_ok {
            agree += 1;
        }
    }
    let mut solvable_all = 0;
    for seed in 0..500u64 {
        let data = tasks::generate_data(TaskKind::Puzzle24, seed, &cfg).unwrap();
        let TaskData::Puzzle24 { data, solution, .. } = &data else { unreachable!() };
        if solvable(data.numbers) && tasks::puzzle24::check_expression(&data.numbers, solution) {
            solvable_all += 1;
        }
    }
    let ones = tasks::puzzle24::solve_puzzle24_oracle(&[1, 1, 1, 1]).is_none() && !solvable([1, 1, 1, 1]);
    let words: Vec<String> = "violates yes already completing pages duty his EXPRESS duly"
        .split(' ')
        .map(String::from)
        .collect();
    let fig = tasks::instance_from_data(0, &TaskData::WordSorting { words }).unwrap();
    let cbrl_answer = tasks::verify(&fig, "EXPRESS, already, completing, duly, duty, his, pages, violates, yes");
    let baseline_answer = tasks::verify(&fig, "EXPRESS, already, completing, duty, his, violates, pages, duly, yes");
    outcome(
        agree == 1000 && solvable_all == 500 && ones && cbrl_answer == 1.0 && baseline_answer == 0.0,
        format!(
            "word sorting {agree}/1000, puzzle24 solvable {solvable_all}/500, (1,1,1,1) unsolvable {ones}, worked list {cbrl_answer}/{baseline_answer}"
        ),
    )
}

fn reward_shaping() -> Outcome {
    let inst = tasks::instance_from_data(0, &TaskData::SpellBackward { word: "cat".into() }).unwrap();
    let spec = RewardSpec::default();
    let thinks = ["", "<think>x</think>", "<think>x</think><think>y</think>", "<think>x"];
    let answers = ["", "<answer>tac</answer>", "<answer>cat</answer>", "<answer>tac", "tac", "<answer>tac</answer><answer>tac</answer>"];
    let joins = ["", "\n", " junk "];
    let mut seen = Vec::new();
    for t in thinks {
        for a in answers {
            for j in joins {
                for order in [true, false] {
                    let resp = if order { format!("{t}{j}{a}") } else { format!("{a}{j}{t}") };
                    for outer in ["", "  ", "pre "] {
                        let r = prompting::total_reward(&inst, &format!("{outer}{resp}"), &spec);
                        if !seen.contains(&r) {
                            seen.push(r);
                        }
                    }
                }
            }
        }
    }
    seen.sort_by(f64::total_cmp);
    let set_ok = seen == vec![0.0, 0.2, 1.2];
    let a = prompting::test_pass_reward(2, 5, 1.0, 2.0).unwrap();
    let b = prompting::test_pass_reward(5, 5, 1.0, 2.0).unwrap();
    outcome(
        set_ok && a == 0.4 && b == 3.0,
        format!("reachable {seen:?}, test_pass_reward(2,5)={a}, (5,5)={b}"),
    )
}

fn smoke_config(out: &Path) -> TrainConfig {
    let mut c = experiments::spell_backward_base();
    c.schedule.total_steps = 50;
    c.batch_size = 8;
    c.rl.group_size = 4;
    c.eval.every = 25;
    c.eval.problems = 20;
    c.record_timing = false;
    c.master_seed = 5;
    c.out_dir = Some(out.to_path_buf());
    c
}

fn artifacts(dir: &Path) -> Vec<Vec<u8>> {
    ["metrics.jsonl", "metrics.csv", "eval.jsonl", "final.ckpt"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect()
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let d = |n: &str| root.path().join(n);
    let mut zero = smoke_config(&d("zero"));
    zero.schedule.p_start = 0.0;
    let mut off = smoke_config(&d("off"));
    off.injection_enabled = false;
    train(zero.clone()).unwrap();
    train(off).unwrap();
    let equivalent = artifacts(&d("zero")) == artifacts(&d("off"));

    let cb = smoke_config(&d("cbrl_a"));
    train(cb.clone()).unwrap();
    let mut again = cb.clone();
    again.out_dir = Some(d("cbrl_b"));
    train(again).unwrap();
    let repeatable = artifacts(&d("cbrl_a")) == artifacts(&d("cbrl_b"));

    let mut first = cb.clone();
    first.out_dir = Some(d("split"));
    first.stop_after = 20;
    first.checkpoint_every = 20;
    train(first).unwrap();
    let mut rest = cb;
    rest.out_dir = Some(d("split"));
    Trainer::resume(rest, &d("split").join("checkpoints/step_000020.ckpt"))
        .unwrap()
        .run()
        .unwrap();
    let resumed = artifacts(&d("cbrl_a")) == artifacts(&d("split"));
    outcome(
        equivalent && repeatable && resumed,
        format!("p=0 equals disabled {equivalent}, same-seed repeat {repeatable}, resume {resumed}"),
    )
}

fn mechanism_dir() -> PathBuf {
    std::env::var_os("CBRL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-mechanism"))
}

fn mechanism() -> Outcome {
    let preset = experiments::preset("mechanism").unwrap();
    let opts = RunOptions {
        out_dir: mechanism_dir(),
        jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        reuse: true,
        total_steps: None,
        warmstart_steps: None,
    };
    let v = experiments::run_preset(&preset, &opts).unwrap();
    let mut detail: Vec<String> = v
        .checks
        .iter()
        .map(|c| format!("{} {}/{}", c.label, c.wins, v.seeds.len()))
        .collect();
    for arm in ["baseline", "cbrl", "high", "rloo-baseline", "rloo-cbrl"] {
        let rs: Vec<&experiments::RunSummary> = v.runs.iter().filter(|r| r.arm == arm).collect();
        let early: Vec<String> = rs.iter().map(|r| format!("{:.3}", r.early_reward)).collect();
        let fin: Vec<String> = rs
            .iter()
            .map(|r| r.final_eval.map(|e| format!("{e:.3}")).unwrap_or("-".into()))
            .collect();
        detail.push(format!("{arm} early [{}] final [{}]", early.join(" "), fin.join(" ")));
    }
    detail.extend(v.failures.iter().cloned());
    outcome(v.pass, detail.join("; "))
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(&str, u64, fn() -> Outcome)> = vec![
        ("schedule exactness", 1, schedule_exactness),
        ("injection statistics", 10, injection_statistics),
        ("advantage identities", 5, advantage_identities),
        ("gradient correctness", 60, gradient_correctness),
        ("verifier and oracle equivalence", 30, verifier_oracles),
        ("reward shaping", 1, reward_shaping),
        ("baseline equivalence and determinism", 300, determinism),
        ("mechanism reproduction", 45 * 60, mechanism),
    ];
    let mut failed = Vec::new();
    for (name, limit, f) in criteria {
        if !report(name, Duration::from_secs(limit), f) {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn grpo_and_rloo_agree_on_a_shared_fixture() {
    // Both estimators rank samples identically and vanish on equal rewards.
    let r = [1.2, 0.2, 0.0, 1.2, 0.2, 0.2, 0.0, 0.0];
    let g = rl::grpo_advantages(&r).unwrap();
    let l = rl::rloo_advantages(&r).unwrap();
    for i in 0..r.len() {
        for j in 0..r.len() {
            assert_eq!(g[i] > g[j], l[i] > l[j]);
        }
    }
    let c = RlConfig {
        algorithm: Algorithm::Rloo,
        ..RlConfig::default()
    };
    assert_eq!(rl::advantages(&[0.2; 8], &c).unwrap(), vec![0.0; 8]);
}
