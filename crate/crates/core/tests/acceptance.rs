//! Acceptance suite: runs every criterion and prints one PASS/FAIL line per
//! criterion. The process exits nonzero when any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use segpred::data::{split_by_group, Sample, Split};
use segpred::experiment::{aligned_windows, desk_profile, run_ablation, sweep_cell, train_kind, ModelKind, SynthCorpus};
use segpred::metrics::{edit_distance, EvalReport};
use segpred::predictor::{
    evaluate, save_checkpoint, Fusion, ModelConfig, Prediction, StatvtPred, TrainConfig, TransformerBaseline,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const L_IN: usize = 8;
const L_OUT: usize = 4;

struct Verdict {
    pass: bool,
    detail: String,
    secs: f64,
}

/// Every report and prediction list produced along the way, for the metric
/// relation check.
#[derive(Default)]
struct Reports {
    reports: Vec<(String, EvalReport)>,
    predictions: Vec<Vec<Prediction>>,
}

impl Reports {
    fn add(&mut self, label: String, r: &EvalReport) {
        self.reports.push((label, r.clone()));
    }

    fn eval(&mut self, label: String, m: &dyn segpred::predictor::Seq2Seq, samples: &[Sample], filter: bool) -> EvalReport {
        let (r, p) = evaluate(m, samples, filter).unwrap();
        self.add(label, &r);
        self.predictions.push(p);
        r
    }
}

/// Results of one seed of the desk-scale experiment.
struct SeedRun {
    seed: u64,
    train_secs: f64,
    train_amr: f64,
    test_full: f64,
    test_no_filter: f64,
    test_transformer: f64,
    chance: (f64, f64),
    /// AMR at input length 8 for output lengths 1..=4.
    by_l_out: [f64; 4],
    amr_l_in_2: f64,
    full_model: Option<StatvtPred>,
}

fn seed_config(seed: u64) -> segpred::config::ExperimentConfig {
    let mut cfg = desk_profile();
    cfg.synth.seed = seed;
    cfg.model.init_seed = seed;
    cfg.train.seed = seed;
    cfg.data.l_in = L_IN;
    cfg.data.l_out = L_OUT;
    cfg
}

fn run_seed(seed: u64, reports: &mut Reports) -> SeedRun {
    let cfg = seed_config(seed);
    let corpus = SynthCorpus::generate(&cfg.synth).unwrap();
    let samples = aligned_windows(&corpus.sequences, L_IN, L_OUT, L_IN).unwrap();
    let split = split_by_group(&samples, cfg.data.split, cfg.data.split_seed).unwrap();
    let config = cfg.model_for(corpus.mask.n_tokens());

    let start = Instant::now();
    let (full, _) = train_kind(ModelKind::Statvtpred, config.clone(), corpus.mask.clone(), &split, &cfg.train).unwrap();
    let train_amr = reports.eval(format!("seed {seed} full train"), full.as_dyn(), &split.train, true).amr;
    let train_secs = start.elapsed().as_secs_f64();
    let (base, _) = train_kind(ModelKind::Transformer, config, corpus.mask.clone(), &split, &cfg.train).unwrap();
    let test_full = reports.eval(format!("seed {seed} full test"), full.as_dyn(), &split.test, true).amr;
    let test_no_filter = reports.eval(format!("seed {seed} -filter test"), full.as_dyn(), &split.test, false).amr;
    let test_transformer = reports.eval(format!("seed {seed} transformer test"), base.as_dyn(), &split.test, false).amr;
    let chance = chance_amr(&corpus.network, &corpus.vocab, &corpus.mask, &split.test);

    let mut by_l_out = [0.0; 4];
    by_l_out[L_OUT - 1] = test_full;
    for l_out in 1..L_OUT {
        let (cell, r) = sweep_cell(&cfg, &corpus.sequences, &corpus.mask, L_IN, l_out, L_IN).unwrap();
        reports.add(format!("seed {seed} sweep {L_IN}x{l_out}"), &r);
        by_l_out[l_out - 1] = cell.amr;
    }
    let (cell, r) = sweep_cell(&cfg, &corpus.sequences, &corpus.mask, 2, L_OUT, L_IN).unwrap();
    reports.add(format!("seed {seed} sweep 2x{L_OUT}"), &r);

    let full_model = match full {
        segpred::predictor::AnyModel::Statvtpred(m) => Some(m),
        segpred::predictor::AnyModel::Transformer(_) => None,
    };
    SeedRun {
        seed,
        train_secs,
        train_amr,
        test_full,
        test_no_filter,
        test_transformer,
        chance,
        by_l_out,
        amr_l_in_2: cell.amr,
        full_model,
    }
}

fn connectivity(trained: &StatvtPred, reports: &mut Reports) -> Verdict {
    let start = Instant::now();
    let mut cfg = seed_config(1000);
    cfg.synth.n_traj = 1000;
    let corpus = SynthCorpus::generate(&cfg.synth).unwrap();
    let samples = aligned_windows(&corpus.sequences, L_IN, L_OUT, L_IN).unwrap();
    let untrained = StatvtPred::new(cfg.model_for(corpus.mask.n_tokens()), corpus.mask.clone()).unwrap();
    let a = reports.eval("connectivity untrained".into(), &untrained, &samples, true);
    let b = reports.eval("connectivity trained".into(), trained, &samples, true);
    let secs = start.elapsed().as_secs_f64();
    let pass = samples.len() == 1000
        && [&a, &b].iter().all(|r| r.disconnected_pairs == 0 && r.fallback_count == 0)
        && secs < 60.0;
    Verdict {
        pass,
        detail: format!(
            "{} samples; disconnected pairs {}/{} and fallbacks {}/{} (untrained/trained)",
            samples.len(),
            a.disconnected_pairs,
            b.disconnected_pairs,
            a.fallback_count,
            b.fallback_count
        ),
        secs,
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let eps = 1e-4;
    let prims = nncore::gradcheck::check_primitives(0, eps).unwrap();
    let (worst_prim, prim_err) = prims
        .iter()
        .map(|(n, r)| (*n, r.max_rel_err))
        .fold(("", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut detail = format!("{} primitives, worst {prim_err:.2e} ({worst_prim})", prims.len());
    let mut pass = prim_err < 1e-4;
    for fusion in [Fusion::Sum, Fusion::Concat] {
        let (seed, r) = full_model_grad_check(fusion);
        let smallest = r
            .pairs
            .iter()
            .filter(|(a, n)| nncore::gradcheck::rel_err(*a, *n) >= 1e-4)
            .map(|(a, _)| a.abs())
            .fold(f64::INFINITY, f64::min);
        detail += &format!(
            "; full model {fusion:?} (init seed {seed}, {} coords) max rel {:.2e} at {:?}",
            r.coordinates, r.max_rel_err, r.worst
        );
        if smallest.is_finite() {
            detail += &format!(
                ", failing coords have |grad| >= {smallest:.1e}, violations of rtol 1e-4 + atol 1e-10: {}",
                r.violations(1e-4, 1e-10)
            );
        }
        pass &= r.max_rel_err < 1e-4;
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: pass && secs < 120.0,
        detail,
        secs,
    }
}

fn normalization() -> Verdict {
    let start = Instant::now();
    let devs = [softmax_row_deviation(), attention_row_deviation(), gat_neighborhood_deviation()];
    Verdict {
        pass: devs.iter().all(|d| *d <= 1e-12),
        detail: format!(
            "max |row sum - 1|: softmax {:.1e}, attention {:.1e}, graph attention {:.1e}",
            devs[0], devs[1], devs[2]
        ),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn oracles() -> Verdict {
    let start = Instant::now();
    let results = [
        ("edit distance pairs", check_edit_distance()),
        ("UBODT pairs", check_ubodt_against_dijkstra()),
        ("Viterbi lattices", check_viterbi()),
    ];
    let pass = results.iter().all(|(_, r)| r.is_ok());
    let detail = results
        .iter()
        .map(|(n, r)| match r {
            Ok(k) => format!("{n} {k} ok"),
            Err(e) => format!("{n}: {e}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    Verdict {
        pass,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn map_matching() -> Verdict {
    let start = Instant::now();
    let r = grid_recovery(200, 10.0, 7);
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: r >= 0.95 && secs < 120.0,
        detail: format!("recovery {r:.4} over 200 walks, sigma 10 m"),
        secs,
    }
}

fn learning(runs: &[SeedRun]) -> Verdict {
    let r = &runs[0];
    let chance = r.chance.0.max(r.chance.1);
    let margin = r.test_full - chance;
    let others: Vec<String> = runs[1..]
        .iter()
        .map(|o| format!("seed {} {:.3}/{:.3}", o.seed, o.train_amr, o.test_full))
        .collect();
    Verdict {
        pass: r.train_amr >= 0.95 && margin >= 0.20 && r.train_secs < 600.0,
        detail: format!(
            "seed {}: train AMR {:.4}, test AMR {:.4}, chance {:.4} (all successors {:.4}, no U-turn {:.4}), margin {:.4}; other seeds train/test {}",
            r.seed,
            r.train_amr,
            r.test_full,
            chance,
            r.chance.0,
            r.chance.1,
            margin,
            others.join(", ")
        ),
        secs: r.train_secs,
    }
}

fn ablation(runs: &[SeedRun], secs: f64) -> Verdict {
    let ordered = runs
        .iter()
        .filter(|r| r.test_full >= r.test_no_filter && r.test_no_filter >= r.test_transformer)
        .count();
    let rows: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {} {:.3} >= {:.3} >= {:.3} (filter gap {:+.3})",
                r.seed,
                r.test_full,
                r.test_no_filter,
                r.test_transformer,
                r.test_full - r.test_no_filter
            )
        })
        .collect();
    Verdict {
        pass: ordered >= 4,
        detail: format!("ordering holds on {ordered}/5 seeds: {}", rows.join("; ")),
        secs,
    }
}

fn length_sweep(runs: &[SeedRun], secs: f64) -> Verdict {
    let monotone = runs.iter().filter(|r| r.by_l_out.windows(2).all(|w| w[0] >= w[1])).count();
    let longer_input = runs.iter().filter(|r| r.by_l_out[L_OUT - 1] >= r.amr_l_in_2).count();
    let mean = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (m8, m2) = (mean(&|r| r.by_l_out[L_OUT - 1]), mean(&|r| r.amr_l_in_2));
    let rows: Vec<String> = runs
        .iter()
        .map(|r| {
            let cells: Vec<String> = r.by_l_out.iter().map(|a| format!("{a:.3}")).collect();
            format!("seed {} out 1-4 [{}] in2 {:.3}", r.seed, cells.join(" "), r.amr_l_in_2)
        })
        .collect();
    let bayes: Vec<String> = bayes_amr(&desk_profile().synth, 50_000, 5_000, L_IN, L_OUT)
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect();
    Verdict {
        pass: monotone >= 4 && longer_input >= 4 && m8 >= m2,
        detail: format!(
            "non-increasing in output length on {monotone}/5 seeds; AMR(in 8) >= AMR(in 2) on {longer_input}/5 seeds, mean {m8:.3} vs {m2:.3}; {}; Bayes-optimal AMR for output lengths 1-4 on this generator [{}]",
            rows.join("; "),
            bayes.join(" ")
        ),
        secs,
    }
}

fn metric_relation(reports: &Reports) -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut float_slack = 0;
    for (label, r) in &reports.reports {
        let mut scores = vec![(r.l_out, r.de, r.amr)];
        scores.extend(r.per_length.iter().map(|p| (p.l_out, p.de, p.amr)));
        for (l, de, amr) in scores {
            let n = (r.n_samples * l) as f64;
            let (edits, hits) = ((de * n).round(), (amr * n).round());
            let exact = edits / n == de && hits / n == amr;
            if !exact || edits > n - hits {
                failures.push(format!("{label} l_out {l}"));
            }
            if de > 1.0 - amr {
                float_slack += 1;
            }
            checked += 1;
        }
    }
    let mut samples = 0;
    for preds in &reports.predictions {
        for p in preds {
            let fitted = segpred::metrics::fit_length(&p.predicted, p.target.len());
            let target: Vec<Option<usize>> = p.target.iter().copied().map(Some).collect();
            let hamming = fitted.iter().zip(&target).filter(|(a, b)| a != b).count();
            if edit_distance(&fitted, &target) > hamming {
                failures.push(format!("sample {}", p.sample_id));
            }
            samples += 1;
        }
    }
    Verdict {
        pass: failures.is_empty(),
        detail: format!(
            "{checked} scores from {} reports and {samples} samples checked, {} violations (float comparison off by rounding on {float_slack})",
            reports.reports.len(),
            failures.len()
        ),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn checkpoint_bytes(m: &dyn segpred::predictor::Seq2Seq) -> Vec<Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(m, "statvtpred", "vocab.csv", dir.path()).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|f| std::fs::read(f).unwrap()).collect()
}

fn determinism() -> Verdict {
    let start = Instant::now();
    let mut cfg = seed_config(11);
    cfg.synth.n_traj = 300;
    cfg.train.epochs = 3;
    let corpus = SynthCorpus::generate(&cfg.synth).unwrap();
    let samples = aligned_windows(&corpus.sequences, L_IN, L_OUT, L_IN).unwrap();
    let split: Split<Sample> = split_by_group(&samples, cfg.data.split, cfg.data.split_seed).unwrap();
    let config = cfg.model_for(corpus.mask.n_tokens());
    let run = || {
        let (m, out) = train_kind(ModelKind::Statvtpred, config.clone(), corpus.mask.clone(), &split, &cfg.train).unwrap();
        let (report, preds) = evaluate(m.as_dyn(), &split.test, true).unwrap();
        (checkpoint_bytes(m.as_dyn()), out, report, preds)
    };
    let (a, b) = (run(), run());
    let reruns = a == b;
    let ablation_rows = run_ablation(&cfg, &corpus.mask, &split).unwrap() == run_ablation(&cfg, &corpus.mask, &split).unwrap();

    // The full model with both components off against the baseline, first
    // sharing one set of weights, then trained separately from one seed.
    let ablated = ModelConfig {
        use_gat: false,
        use_filter: false,
        ..config
    };
    let tc = TrainConfig {
        epochs: 2,
        ..cfg.train.clone()
    };
    let mut full = StatvtPred::new(ablated.clone(), corpus.mask.clone()).unwrap();
    segpred::predictor::train(&mut full, &split.train, &split.val, &tc).unwrap();
    let shared = TransformerBaseline::from_model(&full).unwrap();
    let mut separate = TransformerBaseline::new(ablated, corpus.mask.clone()).unwrap();
    segpred::predictor::train(&mut separate, &split.train, &split.val, &tc).unwrap();
    let outputs = |m: &dyn segpred::predictor::Seq2Seq| {
        let inputs: Vec<&[usize]> = split.test.iter().map(|s| s.input.as_slice()).collect();
        let prefixes: Vec<&[usize]> = split.test.iter().map(|s| &s.target[..L_OUT - 1]).collect();
        let mut g = nncore::Graph::new();
        let y = m.forward(&mut g, &inputs, &prefixes).unwrap();
        let bits: Vec<u64> = g.value(y).data().iter().map(|x| x.to_bits()).collect();
        let (report, preds) = evaluate(m, &split.test, m.config().use_filter).unwrap();
        (bits, report, preds)
    };
    let reference = outputs(&full);
    let same_weights = outputs(&shared) == reference;
    let shared_params_equal = separate.params.ids().all(|id| {
        let p = separate.params.get(id);
        full.params
            .find(&p.name)
            .is_some_and(|f| full.params.value(f).data() == separate.params.value(id).data())
    });
    let same_seed = outputs(&separate) == reference && shared_params_equal;
    Verdict {
        pass: reruns && ablation_rows && same_weights && same_seed,
        detail: format!(
            "repeat runs bit-identical (checkpoint, history, report, predictions): {reruns}; repeat ablation identical: {ablation_rows}; ablated model vs baseline with shared weights: {same_weights}; trained separately from one seed: {same_seed}"
        ),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn main() {
    let mut reports = Reports::default();
    let mut verdicts: Vec<(usize, &str, Verdict)> = vec![
        (2, "gradient correctness", gradients()),
        (3, "normalization", normalization()),
        (4, "oracle equivalence", oracles()),
        (5, "map-matching recovery", map_matching()),
    ];
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        eprintln!("acceptance: desk-scale runs for seed {seed}");
        runs.push(run_seed(seed, &mut reports));
    }
    let desk_secs = start.elapsed().as_secs_f64();
    let trained = runs[0].full_model.take().unwrap();
    verdicts.push((1, "connectivity", connectivity(&trained, &mut reports)));
    verdicts.push((6, "learning", learning(&runs)));
    verdicts.push((7, "ablation ordering", ablation(&runs, desk_secs)));
    verdicts.push((8, "length sweep", length_sweep(&runs, desk_secs)));
    verdicts.push((10, "determinism and ablation identity", determinism()));
    verdicts.push((9, "metric relation", metric_relation(&reports)));
    verdicts.sort_by_key(|v| v.0);

    let mut failed = 0;
    for (id, name, v) in &verdicts {
        println!(
            "criterion {id:>2} {name}: {} ({:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.secs,
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {}/{} criteria pass", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
