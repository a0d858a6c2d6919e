//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use caes_cli::config::RunConfig;
use caes_core::caes::{
    bound_score, read_report, select_top_fraction, selection_size, FeatureCausalScore,
    FeatureSet, FeatureTable, RatioKind,
};
use caes_core::causepairs::{Direction, SamplePairSet};
use caes_core::imaging::{
    ClassifierEpoch, ClassifierModel, ClassifierSpec, EffectVariable, Variant,
};
use caes_core::ncc::{ncc_forward, ncc_score_symmetric, EpochStats, NccModel};
use caes_core::nn::{Dense, Parameterized};
use caes_core::rng::seeded;
use caes_core::saliency::{gradcam_squared, make_cutouts, masks_for_dataset, threshold_mask, BinaryMask, MaskSource};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

const NCC_BUDGET: Duration = Duration::from_secs(15 * 60);
const DESK_BUDGET: Duration = Duration::from_secs(10 * 60);

fn work_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn tubingen_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/tubingen")
        .canonicalize()
        .expect("benchmark data present")
}

fn caes(dir: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_caes"))
        .args(args)
        .current_dir(dir)
        .env_remove("CAES_CONFIG")
        .output()
        .map_err(|e| format!("spawn caes: {e}"))?;
    if !o.status.success() {
        return Err(format!(
            "caes {} exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_pair<R: Rng>(r: &mut R, id: &str) -> SamplePairSet {
    let n = r.random_range(2..200);
    let xs = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let ys = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    SamplePairSet::new(id, xs, ys, Direction::Unlabeled, 1.0).unwrap()
}

fn trained_like_ncc(seed: u64) -> NccModel {
    let mut m = NccModel::new(caes_core::ncc::DEFAULT_HIDDEN, &mut seeded(seed));
    let h = m.hidden();
    m.classifier[2] = Dense::he(h, 1, &mut seeded(seed + 1));
    m
}

/// Desk classifier with a random final layer so every class has a gradient.
fn random_desk_classifier(seed: u64) -> ClassifierModel {
    let spec = ClassifierSpec::desk(4);
    let w = spec.head_width;
    let mut m = ClassifierModel::new(spec, &mut seeded(seed)).unwrap();
    m.head[2] = Dense::he(w, 4, &mut seeded(seed + 1));
    m
}

fn criterion_1(dir: &Path) -> Outcome {
    let cfg = format!(
        "run_id = \"acceptance-ncc\"\noutput_dir = \"ncc\"\n[ncc]\ntubingen_dir = \"{}\"\n",
        tubingen_dir().display()
    );
    std::fs::write(dir.join("ncc.toml"), cfg).unwrap();
    let start = Instant::now();
    caes(dir, &["train-ncc", "-c", "ncc.toml"])?;
    let elapsed = start.elapsed();
    let history: Vec<EpochStats> = read_json(&dir.join("ncc/ncc-history.json"))?;
    let synthetic = history
        .iter()
        .map(|e| e.heldout_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let out = caes(dir, &["eval-ncc", "-c", "ncc.toml"])?;
    let tubingen: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("weighted_accuracy="))
        .ok_or("eval-ncc printed no accuracy")?
        .parse()
        .map_err(|e| format!("bad accuracy: {e}"))?;
    ensure(
        synthetic >= 0.90 && tubingen >= 0.65 && elapsed <= NCC_BUDGET,
        format!(
            "held-out synthetic accuracy {synthetic:.4} (>= 0.90), Tübingen weighted accuracy {tubingen:.4} (>= 0.65), training {:.0}s (<= 900s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let at = |s: f64| bound_score(s).map_err(|e| e.to_string());
    if at(0.0)? != 0.0 {
        return Err("bound_score(0) is not exactly 0".into());
    }
    let mut worst: f64 = 0.0;
    let mut prev = -1.0;
    for i in 0..=100 {
        let s = i as f64 / 10.0;
        let v = at(s)?;
        worst = worst.max((v - (s / 2.0).tanh()).abs());
        if v <= prev {
            return Err(format!("not increasing at s = {s}"));
        }
        prev = v;
    }
    let mut r = seeded(2);
    let mut grid: Vec<f64> = (0..10_000).map(|_| r.random_range(0.0..1e6)).collect();
    grid.extend([10.0, 20.0, 36.0, 37.0, 38.0, 100.0, 1e3, 1e6]);
    grid.sort_by(f64::total_cmp);
    let vals: Vec<f64> = grid.iter().map(|&s| at(s)).collect::<Result<_, _>>()?;
    let below_one = vals.iter().all(|v| *v < 1.0);
    let monotone = vals.windows(2).all(|w| w[0] <= w[1]);
    ensure(
        worst <= 1e-12 && below_one && monotone,
        format!("max |bound - tanh(s/2)| = {worst:.1e} on the 0.1 grid, below one and monotone up to 1e6: {}", below_one && monotone),
    )
}

fn criterion_3() -> Outcome {
    let mut r = seeded(3);
    let model = random_desk_classifier(30);
    let n = model.spec.input_size;
    let mut checked = BTreeMap::new();
    for i in 0..200 {
        let img = Array3::from_shape_simple_fn((3, n, n), || r.random::<f64>());
        let p = r.random_range(0.05..0.95);
        let human = BinaryMask::human(Array2::from_shape_simple_fn((n, n), || u8::from(r.random_bool(p))));
        let k = r.random_range(0..4);
        let retain = r.random_range(0.05..0.95);
        let heat = gradcam_squared(&model, img.view(), k, "img").map_err(|e| e.to_string())?;
        let gradcam = threshold_mask(&heat, retain).map_err(|e| format!("image {i}: {e}"))?;
        for mask in [human, gradcam] {
            let c = make_cutouts(img.view(), &mask, "img").map_err(|e| e.to_string())?;
            if &c.object_only + &c.context_only != img {
                return Err(format!("image {i}: {} cutouts do not sum to the original", mask.source));
            }
            *checked.entry(mask.source).or_insert(0) += 1;
        }
    }
    Ok(format!("bit-exact reconstruction on {checked:?} image/mask pairs"))
}

fn criterion_4(desk: &DeskRun) -> Outcome {
    let cfg = &desk.config;
    let ds = caes_cli::commands::load_dataset(cfg).map_err(|e| e.to_string())?;
    let model = ClassifierModel::load(cfg.classifier_checkpoint()).map_err(|e| e.to_string())?;
    let set = masks_for_dataset(Some(&model), &ds, MaskSource::Gradcam, cfg.saliency.retain_fraction)
        .map_err(|e| e.to_string())?;
    let mut tied = 0;
    let mut outside = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (id, m) in &set.masks {
        if m.is_tied() {
            tied += 1;
            continue;
        }
        let f = m.foreground_fraction();
        lo = lo.min(f);
        hi = hi.max(f);
        if !(0.28..=0.32).contains(&f) {
            outside.push(format!("{id}={f:.4}"));
        }
    }
    ensure(
        outside.is_empty() && set.degenerate.is_empty(),
        format!(
            "{} masks, {tied} tie-flagged, {} degenerate, fraction range [{lo:.4}, {hi:.4}]{}",
            set.masks.len(),
            set.degenerate.len(),
            if outside.is_empty() { String::new() } else { format!(", outside: {}", outside.join(" ")) }
        ),
    )
}

fn set_flat<P: Parameterized>(m: &mut P, i: usize, value: f64) -> f64 {
    let mut offset = 0;
    for t in m.params_mut() {
        if i < offset + t.len() {
            let old = t[i - offset];
            t[i - offset] = value;
            return old;
        }
        offset += t.len();
    }
    panic!("parameter {i} out of range");
}

fn criterion_5() -> Outcome {
    // Classifier: gradient of each logit with respect to the last block.
    let model = random_desk_classifier(50);
    let n = model.spec.input_size;
    let mut r = seeded(51);
    let img = Array3::from_shape_simple_fn((3, n, n), || r.random::<f64>());
    let mut clf_worst: f64 = 0.0;
    for k in 0..4 {
        let g = model.map_gradient(img.view(), k).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for idx in ndarray::indices(g.maps.dim()) {
            let mut up = g.maps.clone();
            up[idx] += h;
            let mut down = g.maps.clone();
            down[idx] -= h;
            let numeric = (model.logits_from_maps(&up)[k] - model.logits_from_maps(&down)[k]) / (2.0 * h);
            clf_worst = clf_worst.max(rel_err(g.gradient[idx], numeric));
        }
    }

    // Last convolution weights through the cross-entropy loss.
    let (_, grad) = model.loss_gradient(img.view(), 2).map_err(|e| e.to_string())?;
    let analytic = grad.flat_params();
    let names = model.params();
    let last = format!("conv.{}.weight", model.convs.len() - 1);
    let start: usize = names.iter().take_while(|p| p.name != last).map(|p| p.data.len()).sum();
    let len = names.iter().find(|p| p.name == last).map(|p| p.data.len()).unwrap();
    drop(names);
    let h = 1e-6;
    let mut conv_worst: f64 = 0.0;
    for i in (start..start + len).step_by(37) {
        let mut p = model.clone();
        let base = set_flat(&mut p, i, 0.0);
        set_flat(&mut p, i, base + h);
        let up = p.loss_gradient(img.view(), 2).unwrap().0;
        set_flat(&mut p, i, base - h);
        let down = p.loss_gradient(img.view(), 2).unwrap().0;
        conv_worst = conv_worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }

    // NCC: every parameter through the binary cross-entropy.
    let ncc = trained_like_ncc(52);
    let mut r = seeded(53);
    let mut ncc_worst: f64 = 0.0;
    for direction in [Direction::XtoY, Direction::YtoX] {
        let xs = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let ys = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let pair = SamplePairSet::new("g", xs, ys, direction, 1.0).unwrap();
        let (_, grad) = ncc.loss_gradient(&pair).map_err(|e| e.to_string())?;
        let analytic = grad.flat_params();
        let h = 1e-6;
        for i in 0..ncc.param_count() {
            let mut m = ncc.clone();
            let base = set_flat(&mut m, i, 0.0);
            set_flat(&mut m, i, base + h);
            let up = m.loss_gradient(&pair).unwrap().0;
            set_flat(&mut m, i, base - h);
            let down = m.loss_gradient(&pair).unwrap().0;
            ncc_worst = ncc_worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
        }
    }
    ensure(
        clf_worst < 1e-3 && conv_worst < 1e-3 && ncc_worst < 1e-4,
        format!(
            "classifier last-block map {clf_worst:.1e} and weight {conv_worst:.1e} (< 1e-3), NCC parameters {ncc_worst:.1e} (< 1e-4)"
        ),
    )
}

/// Ratio recomputed straight from the persisted rows.
fn brute_ratio(table: &FeatureTable, k: usize, l: usize, which: RatioKind) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for row in table.rows.iter().filter(|r| r.class == k) {
        let removed = match which {
            RatioKind::Object => row.variant(Variant::ContextOnly)[l],
            RatioKind::Context => row.variant(Variant::ObjectOnly)[l],
        };
        num += (removed - row.original[l]).abs();
        den += row.original[l].abs();
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn criterion_6(desk: &DeskRun) -> Outcome {
    let mut compared = 0;
    for source in MaskSource::ALL {
        let dir = desk.config.output_dir.join(source.to_string());
        let table = FeatureTable::read_json(&dir.join("features.json")).map_err(|e| e.to_string())?;
        let report = read_report(&dir.join("caes.json")).map_err(|e| e.to_string())?;
        for class in &report.classes {
            for set in FeatureSet::ALL {
                for f in &class.set(set).features {
                    let o = brute_ratio(&table, class.class, f.feature, RatioKind::Object);
                    let c = brute_ratio(&table, class.class, f.feature, RatioKind::Context);
                    if o.to_bits() != f.object_ratio.to_bits() || c.to_bits() != f.context_ratio.to_bits() {
                        return Err(format!(
                            "{source} class {} feature {}: oracle ({o}, {c}) vs report ({}, {})",
                            class.class, f.feature, f.object_ratio, f.context_ratio
                        ));
                    }
                    compared += 2;
                }
            }
        }
    }

    let mut r = seeded(6);
    for trial in 0..1000 {
        let len = r.random_range(1..600);
        let fraction = r.random_range(0.001..1.0);
        // Coarse values force ties.
        let coarse = r.random_bool(0.3);
        let ps: Vec<f64> = (0..len)
            .map(|_| {
                let p: f64 = r.random();
                if coarse { (p * 10.0).round() / 10.0 } else { p }
            })
            .collect();
        let scores: Vec<FeatureCausalScore> = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| FeatureCausalScore {
                feature: i,
                class: 0,
                p_causal: p,
                n_batches_averaged: 1,
                zero_variance: false,
            })
            .collect();
        let m = selection_size(fraction, len);
        for set in FeatureSet::ALL {
            let key = |i: usize| match set {
                FeatureSet::Causal => ps[i],
                FeatureSet::Anticausal => 1.0 - ps[i],
            };
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
            order.truncate(m);
            let got = select_top_fraction(&scores, fraction, set).map_err(|e| e.to_string())?;
            if got != order {
                return Err(format!("trial {trial} {set:?}: selection differs from the sorted oracle"));
            }
        }
    }
    Ok(format!("{compared} reported ratios match the oracle bit for bit; 1000 selections match the full sort"))
}

struct DeskRun {
    config: RunConfig,
    outcome: Outcome,
}

const DESK_ARTIFACTS: [&str; 7] = [
    "caes.json",
    "caes.csv",
    "features.json",
    "caes-causal-object.svg",
    "caes-causal-context.svg",
    "caes-anticausal-object.svg",
    "caes-anticausal-context.svg",
];

fn desk_snapshot(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for source in MaskSource::ALL {
        for name in DESK_ARTIFACTS {
            let path = cfg.output_dir.join(source.to_string()).join(name);
            let mut bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            if name == "caes.json" {
                let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
                bytes = text
                    .lines()
                    .filter(|l| !l.trim_start().starts_with("\"timestamp\""))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            files.insert(format!("{source}/{name}"), bytes);
        }
    }
    Ok(files)
}

fn desk_pass(dir: &Path) -> Result<(Duration, f64), String> {
    let start = Instant::now();
    caes(dir, &["train-classifier", "-c", "desk.toml"])?;
    caes(dir, &["score", "-c", "desk.toml"])?;
    let elapsed = start.elapsed();
    let history: Vec<ClassifierEpoch> = read_json(&dir.join("desk/classifier-history.json"))?;
    let acc = history.iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    Ok((elapsed, acc))
}

fn criterion_7(dir: &Path) -> DeskRun {
    let text = format!(
        "output_dir = \"{}\"\n[ncc]\ncheckpoint = \"{}\"\n",
        dir.join("desk").display(),
        dir.join("ncc/ncc.ckpt").display()
    );
    std::fs::write(dir.join("desk.toml"), &text).unwrap();
    let config = RunConfig::load(Some(&dir.join("desk.toml")), &[]).expect("desk config");
    let outcome = (|| {
        let (t1, acc) = desk_pass(dir)?;
        let first = desk_snapshot(&config)?;
        let report_paths = MaskSource::ALL.map(|s| config.output_dir.join(s.to_string()).join("caes.json"));
        let mut sigmas = Vec::new();
        for p in &report_paths {
            let r = read_report(p).map_err(|e| e.to_string())?;
            if r.effect_variable != EffectVariable::Prob || r.classes.len() != 4 {
                return Err(format!("{}: unexpected report shape", p.display()));
            }
            sigmas.extend(r.all_sigmas());
        }
        let in_range = sigmas.iter().all(|s| (0.0..1.0).contains(s));
        let (t2, _) = desk_pass(dir)?;
        let second = desk_snapshot(&config)?;
        let differing: Vec<&String> = first.keys().filter(|k| first[*k] != second[*k]).collect();
        ensure(
            acc >= 0.90 && t1 <= DESK_BUDGET && in_range && differing.is_empty(),
            format!(
                "val accuracy {acc:.4} (>= 0.90), run {:.0}s and rerun {:.0}s (<= 600s), {} sigmas in [0,1): {in_range}, rerun differs in {differing:?}",
                t1.as_secs_f64(),
                t2.as_secs_f64(),
                sigmas.len()
            ),
        )
    })();
    DeskRun { config, outcome }
}

fn criterion_8() -> Outcome {
    let model = trained_like_ncc(80);
    let mut r = seeded(81);
    let (mut anti, mut perm): (f64, f64) = (0.0, 0.0);
    for i in 0..100 {
        let p = random_pair(&mut r, &format!("p{i}"));
        let a = ncc_score_symmetric(&model, &p).map_err(|e| e.to_string())?.p_xy;
        let b = ncc_score_symmetric(&model, &p.swapped()).map_err(|e| e.to_string())?.p_xy;
        anti = anti.max((a + b - 1.0).abs());
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut r);
        let q = SamplePairSet::new(
            "q",
            idx.iter().map(|&j| p.xs[j]).collect(),
            idx.iter().map(|&j| p.ys[j]).collect(),
            Direction::Unlabeled,
            1.0,
        )
        .unwrap();
        let f = |s: &SamplePairSet| ncc_forward(&model, s).map_err(|e| e.to_string());
        perm = perm.max((f(&p)? - f(&q)?).abs());
        let c = ncc_score_symmetric(&model, &q).map_err(|e| e.to_string())?.p_xy;
        perm = perm.max((a - c).abs());
    }
    ensure(
        anti <= 1e-12 && perm <= 1e-9,
        format!("max |p(X,Y) + p(Y,X) - 1| = {anti:.1e} (<= 1e-12), max permutation change {perm:.1e} (<= 1e-9)"),
    )
}

fn timed(label: &str, f: impl FnOnce() -> Outcome) -> Outcome {
    eprintln!("running criterion {label}");
    let start = Instant::now();
    let out = f();
    eprintln!("criterion {label} took {:.1}s", start.elapsed().as_secs_f64());
    out
}

fn main() {
    let dir = work_dir();
    let c1 = timed("1", || criterion_1(&dir));
    let c2 = timed("2", criterion_2);
    let c3 = timed("3", criterion_3);
    let c5 = timed("5", criterion_5);
    let c8 = timed("8", criterion_8);
    eprintln!("running criterion 7");
    let desk = criterion_7(&dir);
    let c4 = timed("4", || match &desk.outcome {
        Err(e) if !desk.config.classifier_checkpoint().is_file() => Err(format!("desk run failed: {e}")),
        _ => criterion_4(&desk),
    });
    let c6 = timed("6", || criterion_6(&desk));

    let results = [
        (1, "NCC benchmark floor", c1),
        (2, "bounded score", c2),
        (3, "cutout partition", c3),
        (4, "GradCAM mask fraction", c4),
        (5, "gradient checks", c5),
        (6, "oracle equivalence", c6),
        (7, "desk end-to-end run", desk.outcome),
        (8, "NCC antisymmetry and permutation", c8),
    ];
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {detail}")
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
