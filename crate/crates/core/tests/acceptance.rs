//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any fails.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rowguard::analysis::{self, Calibration, SecurityParams};
use rowguard::attack::AddressMap;
use rowguard::bfa;
use rowguard::defense::{DefenseConfig, VictimSwap, ProtectionProfile};
use rowguard::dram::{Dram, DramGeometry, FlipModel, RowAddr, TimingParams};
use rowguard::harness::{self, report, RunOptions, ScenarioConfig, Workload};
use rowguard::qnn::{Activation, Batch, BitLocation, Layer, LayerKind, QuantizedModel};
use rowguard::sim::SimCore;

type Check = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn config(name: &str) -> (ScenarioConfig, String) {
    ScenarioConfig::load(&root().join("configs").join(name)).expect("config loads")
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1
fn timing_identity() -> Check {
    let p = SecurityParams::default();
    ensure(p.t_aap == 90, "default t_aap is not 90")?;
    let rows = harness::analyze(&p, None, 10, false).map_err(e2s)?;
    let t_swap = rows
        .iter()
        .find(|(k, _)| k == "t_swap_ns")
        .map(|(_, v)| v.clone())
        .ok_or("no t_swap row")?;
    ensure(t_swap == "270", format!("t_swap = {t_swap}"))?;

    let (cfg, text) = config("default.toml");
    let dir = tempfile::tempdir().map_err(e2s)?;
    let opts = RunOptions::new(cfg, text, None, dir.path().to_path_buf());
    let table = harness::cmd_analyze(&opts).map_err(e2s)?;
    ensure(
        table.lines().any(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            f == ["t_swap_ns", "270"]
        }),
        "printed table lacks t_swap_ns 270",
    )?;
    let csv = std::fs::read_to_string(dir.path().join("analysis.csv")).map_err(e2s)?;
    ensure(csv.lines().any(|l| l == "t_swap_ns,270"), "CSV lacks t_swap_ns,270")?;
    Ok("t_swap = 270 ns".into())
}

// 2
fn flip_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let mut total_flips = 0usize;
    for trace in 0..100u64 {
        let t_rh = if trace % 2 == 0 { 100 } else { 4800 };
        let g = DramGeometry::new(2, 2, 16, 64).map_err(e2s)?;
        let timing = TimingParams {
            t_rh,
            ..TimingParams::default()
        };
        let mut dram = Dram::new(g, timing, FlipModel::default()).map_err(e2s)?;
        let n = rng.gen_range(1..=100_000usize);
        // a few hot rows make threshold crossings common
        let hot: Vec<RowAddr> = (0..4)
            .map(|_| RowAddr::new(rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..16)))
            .collect();
        let mut counter: HashMap<RowAddr, u64> = HashMap::new();
        let mut expected: HashMap<RowAddr, usize> = HashMap::new();
        let mut time = 0;
        for _ in 0..n {
            time += timing.t_act;
            if rng.gen_bool(0.0002) {
                dram.refresh_all(time);
                counter.clear();
                continue;
            }
            let a = if rng.gen_bool(0.9) {
                hot[rng.gen_range(0..hot.len())]
            } else {
                RowAddr::new(rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..16))
            };
            dram.activate(a, time).map_err(e2s)?;
            counter.insert(a, 0);
            for d in [-1i64, 1] {
                let r = a.row as i64 + d;
                if (0..16).contains(&r) {
                    let v = RowAddr::new(a.bank, a.subarray, r as u32);
                    let c = counter.entry(v).or_insert(0);
                    *c += 1;
                    if (*c).is_multiple_of(t_rh) {
                        *expected.entry(v).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut got: HashMap<RowAddr, usize> = HashMap::new();
        for f in dram.flip_log() {
            *got.entry(f.addr).or_insert(0) += 1;
        }
        ensure(
            got == expected,
            format!("trace {trace}: simulator {got:?} vs oracle {expected:?}"),
        )?;
        total_flips += dram.flip_log().len();
    }
    Ok(format!("100 traces agree, {total_flips} flips"))
}

fn secured_set(cfg: &ScenarioConfig, work: &Workload) -> Result<Vec<BitLocation>, String> {
    let prof = work.profile(cfg.profile.rounds).map_err(e2s)?;
    harness::secured_bits(cfg, &prof).map_err(e2s)
}

// 3
fn protection_soundness() -> Check {
    let (mut cfg, _) = config("default.toml");
    cfg.attacker.params.stop_on_success = false;
    cfg.attacker.refresh_intervals = 3;
    let seed = cfg.seed;
    let work = Workload::load(&cfg, seed).map_err(e2s)?;
    let secured = secured_set(&cfg, &work)?;
    let map = AddressMap::layer_major(&cfg.geometry, &work.model.layer_weight_counts(), cfg.layout)
        .map_err(e2s)?;
    let target_rows: BTreeSet<u32> = secured.iter().map(|b| map.data_row_of(*b)).collect();

    let def = harness::run_scenario(&cfg, &work, &secured, None, seed, "c3").map_err(e2s)?;
    ensure(
        def.outcome.sim_time >= 3 * cfg.timing.t_ref,
        format!("simulated {} ns only", def.outcome.sim_time),
    )?;
    ensure(
        def.row.target_row_flips == 0,
        format!("{} flips on secured rows", def.row.target_row_flips),
    )?;
    let secured_hits = def
        .weight_flips
        .iter()
        .filter(|f| target_rows.contains(&map.data_row_of(f.location)))
        .count();
    ensure(secured_hits == 0, format!("{secured_hits} secured-row weight flips"))?;
    let aimed_secured = def
        .outcome
        .failed
        .iter()
        .filter(|b| target_rows.contains(&map.data_row_of(**b)))
        .count();
    ensure(aimed_secured > 0, "attacker never aimed at a secured row")?;

    let mut none = cfg.clone();
    none.defender.kind = "none".into();
    let und = harness::run_scenario(&none, &work, &[], None, seed, "c3-none").map_err(e2s)?;
    ensure(und.outcome.failed.is_empty(), format!("{} failed attempts undefended", und.outcome.failed.len()))?;
    let aimed: BTreeSet<u32> = und
        .outcome
        .landed
        .iter()
        .map(|l| map.data_row_of(l.location))
        .chain(und.outcome.failed.iter().map(|b| map.data_row_of(*b)))
        .collect();
    let landed: BTreeSet<u32> = und.outcome.landed.iter().map(|l| map.data_row_of(l.location)).collect();
    ensure(aimed == landed && !landed.is_empty(), "an aimed row saw no planned flip")?;
    ensure(
        !landed.is_disjoint(&target_rows),
        "undefended attack never reached a secured row",
    )?;
    Ok(format!(
        "defended: 0/{} secured attempts landed over 3 t_ref; undefended: {} flips on {} rows",
        aimed_secured,
        und.outcome.landed.len(),
        landed.len()
    ))
}

// 4
fn baseline_breakable() -> Check {
    let (cfg, _) = config("baseline.toml");
    ensure(cfg.horizon() <= cfg.timing.t_ref, "horizon exceeds one refresh interval")?;
    let seed = cfg.seed;
    let work = Workload::load(&cfg, seed).map_err(e2s)?;
    let secured = secured_set(&cfg, &work)?;
    let set: HashSet<BitLocation> = secured.iter().copied().collect();
    let res = harness::run_scenario(&cfg, &work, &secured, None, seed, "c4").map_err(e2s)?;
    let hits = res.weight_flips.iter().filter(|f| set.contains(&f.location)).count();
    ensure(hits >= 1, "no secured bit flipped within one t_ref")?;
    Ok(format!("{hits} secured-bit flips within one t_ref, {} swaps", res.swaps.len()))
}

// 5
fn targeted_vs_random() -> Check {
    let (cfg, _) = config("default.toml");
    let work = Workload::load(&cfg, cfg.seed).map_err(e2s)?;
    let clean = work.model.accuracy(&work.eval_batch).map_err(e2s)?;
    let guess = 1.0 / work.model.num_classes() as f64;
    let plan = work.plan().map_err(e2s)?;
    let f = plan.len();
    ensure(f <= 50, format!("F = {f}"))?;
    let mut hit = work.model.clone();
    plan.apply_prefix(&mut hit, f);
    let targeted = hit.accuracy(&work.eval_batch).map_err(e2s)?;
    ensure(
        targeted <= guess + 0.03,
        format!("targeted accuracy {targeted:.4} after {f} flips"),
    )?;
    let mut worst = 1.0f64;
    for s in 0..10 {
        let rp = bfa::random_attack_plan(&work.model.layer_weight_counts(), 5 * f, s).map_err(e2s)?;
        let mut m = work.model.clone();
        rp.apply_prefix(&mut m, rp.len());
        worst = worst.min(m.accuracy(&work.eval_batch).map_err(e2s)?);
    }
    ensure(
        clean - worst <= 0.05,
        format!("random {}-flip plan drops to {worst:.4} from {clean:.4}", 5 * f),
    )?;
    Ok(format!(
        "F = {f}: targeted {targeted:.4}; random {} flips worst {worst:.4} vs clean {clean:.4}",
        5 * f
    ))
}

// 6
fn defense_equality() -> Check {
    let (cfg, _) = config("semi_whitebox.toml");
    let mut details = Vec::new();
    for seed in [cfg.seed, cfg.seed + 1, cfg.seed + 2] {
        let work = Workload::load(&cfg, seed).map_err(e2s)?;
        let prof = work.profile(cfg.profile.rounds).map_err(e2s)?;
        let secured = prof.secured_bits();
        let plan = bfa::AttackPlan {
            flips: prof.rounds.concat(),
            stop: work.stop,
        };
        let res = harness::run_scenario(&cfg, &work, &secured, Some(&plan), seed, "c6").map_err(e2s)?;
        ensure(
            res.outcome.attempted == plan.len(),
            format!("seed {seed}: {} of {} planned flips attempted", res.outcome.attempted, plan.len()),
        )?;
        ensure(
            res.final_model.bit_tensor() == work.model.bit_tensor(),
            format!(
                "seed {seed}: {} weight bits differ",
                res.final_model.hamming_distance(&work.model)
            ),
        )?;
        ensure(
            res.row.clean_accuracy == res.row.post_attack_accuracy,
            format!(
                "seed {seed}: {} vs {}",
                res.row.clean_accuracy, res.row.post_attack_accuracy
            ),
        )?;
        details.push(format!("{:.4}/{:.4}", res.row.clean_accuracy, res.row.post_attack_accuracy));
    }
    Ok(format!("clean/post {}", details.join(", ")))
}

// 7
fn sb_monotonicity() -> Check {
    let (cfg, text) = config("sb_sweep.toml");
    let n = cfg.sweep.as_ref().map_or(0, |s| s.values.len());
    ensure(n >= 5, "fewer than 5 sweep points")?;
    let dir = tempfile::tempdir().map_err(e2s)?;
    let opts = RunOptions::new(cfg, text, None, dir.path().to_path_buf());
    let points = harness::cmd_sweep(&opts).map_err(e2s)?;
    let v: Vec<f64> = points.iter().map(|p| p.flips_to_degrade()).collect();
    let shown = points
        .iter()
        .map(|p| format!("{}:{:.1}", p.value, p.flips_to_degrade()))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(v.windows(2).all(|w| w[1] >= w[0]), format!("not monotone: {shown}"))?;
    ensure(
        v[v.len() - 1] >= 3.0 * v[0],
        format!("largest/smallest {:.2}: {shown}", v[v.len() - 1] / v[0]),
    )?;
    Ok(format!("{shown} (x{:.1})", v[v.len() - 1] / v[0]))
}

fn pipeline_device(m: usize, pipeline: bool, layout: u64) -> Result<(Vec<u8>, u64), String> {
    let g = DramGeometry::default();
    let timing = TimingParams::default();
    let mut dram = Dram::new(g, timing, FlipModel::default()).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(layout);
    let all: Vec<RowAddr> = dram.rows().map(|(a, _)| a).collect();
    for a in all {
        let bits: Vec<u8> = (0..g.row_bytes()).map(|_| rng.gen()).collect();
        dram.load_row(a, &bits).map_err(e2s)?;
    }
    let rows: Vec<RowAddr> = (0..m as u32)
        .map(|i| match layout {
            0 => RowAddr::new(0, 0, 2 + 3 * i),
            1 => RowAddr::new(0, i % 8, 2 + 3 * (i / 8)),
            _ => RowAddr::new(0, i % 3, 2 + 3 * (i / 3)),
        })
        .collect();
    let non_targets: BTreeSet<RowAddr> = (0..8)
        .map(|s| RowAddr::new(0, s, 100))
        .chain((0..8).map(|s| RowAddr::new(0, s, 104)))
        .collect();
    let targets: BTreeSet<RowAddr> = rows.iter().copied().collect();
    let profile = ProtectionProfile::with_tail_reserved(targets, non_targets, g.rows_per_subarray, 1);
    let mut core = SimCore::new(dram, AddressMap::default());
    let cfg = DefenseConfig {
        pipeline,
        seed: 7,
        ..DefenseConfig::default()
    };
    let mut d = VictimSwap::new(&cfg, &profile, &mut core).map_err(e2s)?;
    let start = 1000;
    let (_, end) = d.run_batch(&mut core, &rows, start).map_err(e2s)?;
    let mem: Vec<u8> = core.dram.contents().flatten().copied().collect();
    Ok((mem, end - start))
}

// 8
fn pipeline_law() -> Check {
    let t = TimingParams::default();
    let t_rng = DefenseConfig::default().t_rng;
    let mut out = Vec::new();
    for m in [1u64, 2, 5, 10] {
        let want = t_rng + t.t_aap * (4 + 3 * (m - 1));
        for layout in 0..3 {
            let (mem_p, lat) = pipeline_device(m as usize, true, layout)?;
            ensure(lat == want, format!("m={m} layout {layout}: {lat} ns, expected {want}"))?;
            let (mem_np, lat_np) = pipeline_device(m as usize, false, layout)?;
            ensure(
                lat_np == m * (t_rng + 4 * t.t_aap),
                format!("m={m}: non-pipelined {lat_np} ns"),
            )?;
            ensure(mem_p == mem_np, format!("m={m} layout {layout}: final contents differ"))?;
        }
        out.push(format!("m={m}:{want}"));
    }
    Ok(out.join(" "))
}

// 9
fn formula_cross_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0i64;
    for i in 0..10 {
        let t_act = rng.gen_range(30..=60);
        let p = SecurityParams {
            s_bit: rng.gen_range(1..=2400),
            banks: rng.gen_range(8..=32),
            t_act,
            t_aap: rng.gen_range(2 * t_act..=2 * t_act + 40),
            t_rh: rng.gen_range(1000..=8000),
            t_ref: 64_000_000,
        };
        let n_s = analysis::rows_per_bank(&p) as i64;
        let formula = analysis::swaps_per_refresh(&p).map_err(e2s)? as i64;
        let sim = harness::simulated_swaps_per_refresh(&p, 10).map_err(e2s)? as i64;
        ensure(
            (sim - formula).abs() <= n_s,
            format!("set {i}: simulated {sim} vs formula {formula}, N_s {n_s}"),
        )?;
        worst = worst.max((sim - formula).abs());
    }
    let base = SecurityParams {
        s_bit: 24_000,
        ..SecurityParams::default()
    };
    let mut prev = (0u64, 0u64);
    for s in (0..=48_000).step_by(4000) {
        let p = SecurityParams { s_bit: s, ..base };
        let cur = (analysis::rows_per_bank(&p), analysis::window_time(&p));
        ensure(cur.0 >= prev.0 && cur.1 >= prev.1, format!("N_s/T_n decrease at s_bit {s}"))?;
        prev = cur;
    }
    let mut prev_t = 0;
    for t_rh in (500..=16_000).step_by(500) {
        let t = analysis::window_time(&SecurityParams { t_rh, ..base });
        ensure(t > prev_t, format!("T_n not increasing at t_rh {t_rh}"))?;
        prev_t = t;
    }
    let mut prev_d = 0.0;
    for t_rh in (500..=16_000).step_by(500) {
        let d = analysis::time_to_break(&SecurityParams { t_rh, ..base }, 1000, 1e6);
        ensure(d > prev_d, format!("time_to_break not increasing at t_rh {t_rh}"))?;
        prev_d = d;
    }
    Ok(format!("10 sets within N_s (largest gap {worst}); monotonicity holds"))
}

// 10
fn calibration() -> Check {
    let c = Calibration::load(&root().join("data/calibration.toml")).map_err(e2s)?;
    let d = c.time_to_break(4096);
    ensure((d - 1180.0).abs() <= 118.0, format!("{d:.1} days at t_rh 4096"))?;
    let days: Vec<f64> = [1000, 2000, 4000, 8000].iter().map(|&t| c.time_to_break(t)).collect();
    ensure(days.windows(2).all(|w| w[1] > w[0]), format!("ordering {days:?}"))?;
    Ok(format!(
        "4096 -> {d:.1} days; 1k..8k {}",
        days.iter().map(|d| format!("{d:.1}")).collect::<Vec<_>>().join(" < ")
    ))
}

// 11
fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (i, h, o) = (8, 12, 4);
    let layer = |inputs, outputs, act, rng: &mut ChaCha8Rng| Layer {
        kind: LayerKind::Dense { inputs, outputs },
        activation: act,
        scale: 0.02,
        codes: (0..inputs * outputs).map(|_| rng.gen_range(-100..=100)).collect(),
        bias: (0..outputs).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    };
    let l1 = layer(i, h, Activation::Tanh, &mut rng);
    let l2 = layer(h, o, Activation::Identity, &mut rng);
    let model = QuantizedModel::new(vec![l1, l2], o).map_err(e2s)?;
    ensure(model.total_weights() <= 200, "test net too large")?;
    let n = 16;
    let data: Vec<f64> = (0..n * i).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|k| k % o).collect();
    let batch = Batch::new(i, data, labels).map_err(e2s)?;
    let w = model.dequantize();
    let (_, grad) = model.loss_and_grad_with(&w, &batch).map_err(e2s)?;
    let step = 1e-4;
    let mut worst = 0.0f64;
    for (li, lw) in w.iter().enumerate() {
        for k in 0..lw.len() {
            let mut plus = w.clone();
            plus[li][k] += step;
            let mut minus = w.clone();
            minus[li][k] -= step;
            let num = (model.loss_with(&plus, &batch).map_err(e2s)?
                - model.loss_with(&minus, &batch).map_err(e2s)?)
                / (2.0 * step);
            let ana = grad[li][k];
            let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
            ensure(rel <= 1e-4, format!("layer {li} weight {k}: analytic {ana:e} numeric {num:e}"))?;
            worst = worst.max(rel);
        }
    }
    Ok(format!("{} weights, worst relative error {worst:.2e}", model.total_weights()))
}

// 12
fn determinism() -> Check {
    let run = |name: &str, cmd: &dyn Fn(&RunOptions) -> Result<(), harness::HarnessError>| -> Result<Vec<(String, Vec<u8>)>, String> {
        let (cfg, text) = config(name);
        let dir = tempfile::tempdir().map_err(e2s)?;
        let opts = RunOptions::new(cfg, text, None, dir.path().to_path_buf());
        cmd(&opts).map_err(e2s)?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .map_err(e2s)?
            .map(|e| {
                let p = e.map_err(e2s)?.path();
                Ok((p.display().to_string().rsplit('/').next().unwrap_or("").to_string(), std::fs::read(&p).map_err(e2s)?))
            })
            .collect::<Result<_, String>>()?;
        files.sort();
        Ok(files)
    };
    let attack = |o: &RunOptions| harness::cmd_attack(o).map(|_| ());
    let analyze = |o: &RunOptions| harness::cmd_analyze(o).map(|_| ());
    let sweep = |o: &RunOptions| harness::cmd_sweep(o).map(|_| ());
    let mut checked = Vec::new();
    for (name, cmd) in [
        ("default.toml", &attack as &dyn Fn(&RunOptions) -> _),
        ("semi_whitebox.toml", &attack),
        ("baseline.toml", &attack),
        ("default.toml", &analyze),
        ("t_rh_sweep.toml", &sweep),
    ] {
        let a = run(name, cmd)?;
        let b = run(name, cmd)?;
        ensure(!a.is_empty() && a == b, format!("{name}: outputs differ between runs"))?;
        for (f, bytes) in &a {
            if f.ends_with(".csv") {
                let text = std::str::from_utf8(bytes).map_err(e2s)?;
                ensure(text.starts_with(report::REPORT_MAGIC), format!("{f}: no version line"))?;
                checked.push(f.clone());
            }
        }
    }
    Ok(format!("{} CSV files byte-identical across reruns", checked.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check, Duration); 12] = [
        ("timing identity", timing_identity, Duration::from_secs(1)),
        ("flip oracle", flip_oracle, Duration::from_secs(30)),
        ("protection soundness", protection_soundness, Duration::from_secs(120)),
        ("baseline breakability", baseline_breakable, Duration::from_secs(120)),
        ("targeted vs random", targeted_vs_random, Duration::from_secs(300)),
        ("defense equality", defense_equality, Duration::from_secs(300)),
        ("SB monotonicity", sb_monotonicity, Duration::from_secs(900)),
        ("pipeline law", pipeline_law, Duration::from_secs(30)),
        ("formula cross-check", formula_cross_check, Duration::from_secs(60)),
        ("calibration", calibration, Duration::from_secs(1)),
        ("gradient check", gradient_check, Duration::from_secs(60)),
        ("determinism", determinism, Duration::from_secs(600)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let res = f();
        let took = start.elapsed();
        let res = match res {
            Ok(d) if took > *limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
            r => r,
        };
        match res {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{took:.2?}]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {e} [{took:.2?}]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
