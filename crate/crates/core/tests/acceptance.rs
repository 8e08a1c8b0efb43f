//! Acceptance suite. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line and
//! then asserts the criterion.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use modality_lab::autodiff::{Graph, Tensor, Var};
use modality_lab::cli::config::{EncoderSettings, ExperimentConfig, OptimizerConfig, SplitFractions, SweepSpec};
use modality_lab::cli::gradcheck::{run_gradcheck, GradCheckSpec, LOSS_NAMES};
use modality_lab::cli::sweep::run_sweep;
use modality_lab::cli::train::{probe_accuracy, train, ProbeFeatures};
use modality_lab::error::Error;
use modality_lab::infogap::{enumerate_verify, verify_theorem, DeterministicEncoder, JointDistribution};
use modality_lab::losses::{self, LossBreakdown, LossWeights};
use modality_lab::metrics::ProbeConfig;
use modality_lab::model::{decode_checkpoint, encode_checkpoint, EncoderConfig, FeatureBundle, TwoTowerModel};
use modality_lab::synthdata::{decode_dataset, encode_dataset, generate, AugmentConfig, GenConfig, PairedDataset};

/// Writes to the raw stdout handle so the line survives libtest output capture.
fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "ACCEPTANCE {n} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let spec = GradCheckSpec::default();
    assert_eq!((spec.configurations, spec.batch_size, spec.dim), (20, 8, 16));
    assert_eq!((spec.step, spec.tolerance), (1e-5, 1e-4));
    assert_eq!(spec.losses.len(), LOSS_NAMES.len());
    let summary = run_gradcheck(&spec).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let pass = summary.failures == 0 && summary.checks == 200 && elapsed < Duration::from_secs(120);
    report(
        1,
        pass,
        format!(
            "{} checks over {} losses, {} failures, worst relative error {:.3e}, {:.1}s",
            summary.checks,
            LOSS_NAMES.len(),
            summary.failures,
            summary.worst_rel_error,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2 and 3

/// Fair bit Y, X_T = Y, X_V an independent fair bit.
fn tight_case() -> JointDistribution {
    let mut p = vec![0.0; 8];
    for y in 0..2 {
        for v in 0..2 {
            p[(y * 2 + v) * 2 + y] = 0.25;
        }
    }
    JointDistribution::new(2, 2, 2, p).unwrap()
}

fn random_joints() -> Vec<JointDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    (0..50).map(|_| JointDistribution::random(3, 3, 2, &mut rng).unwrap()).collect()
}

#[test]
fn criterion_2_theorem_exhaustive() {
    let start = Instant::now();
    let mut violations = 0;
    let mut checked = 0;
    let mut min_slack = f64::INFINITY;
    for p in random_joints() {
        let s = enumerate_verify(&p, 3).unwrap();
        assert_eq!(s.pairs, 729);
        violations += s.violations;
        checked += s.checked;
        if let Some(m) = s.min_slack {
            min_slack = min_slack.min(m);
        }
    }
    let c = DeterministicEncoder::constant(2, 0, 3).unwrap();
    let tight = verify_theorem(&tight_case(), &c, &c).unwrap();
    let elapsed = start.elapsed();
    let pass = violations == 0
        && checked > 0
        && tight.aligned
        && tight.slack.abs() <= 1e-9
        && elapsed < Duration::from_secs(60);
    report(
        2,
        pass,
        format!(
            "50 joints x 729 encoder pairs, {checked} aligned-or-bijective, {violations} violations, \
             min slack {min_slack:.3e}, tight-case slack {:.1e}, {:.1}s",
            tight.slack,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Independent entropy oracle (nats) over a flat `(t, v, y)` table.
struct Oracle {
    sizes: (usize, usize, usize),
    p: Vec<f64>,
}

impl Oracle {
    fn h(weights: impl Iterator<Item = f64>) -> f64 {
        weights.filter(|&w| w > 0.0).map(|w| -w * w.ln()).sum()
    }

    /// Joint entropy of the variables selected by `keep` = (t, v, y).
    fn joint_entropy(&self, keep: (bool, bool, bool)) -> f64 {
        let (nt, nv, ny) = self.sizes;
        let mut m = std::collections::BTreeMap::new();
        for t in 0..nt {
            for v in 0..nv {
                for y in 0..ny {
                    let key = (keep.0.then_some(t), keep.1.then_some(v), keep.2.then_some(y));
                    *m.entry(key).or_insert(0.0) += self.p[(t * nv + v) * ny + y];
                }
            }
        }
        Self::h(m.into_values())
    }

    /// I(A;Y) = H(A) + H(Y) - H(A,Y)
    fn mi(&self, t: bool, v: bool) -> f64 {
        self.joint_entropy((t, v, false)) + self.joint_entropy((false, false, true)) - self.joint_entropy((t, v, true))
    }

    /// I(V;Y|T) = H(T,V) + H(T,Y) - H(T) - H(T,V,Y)
    fn cmi_v_given_t(&self) -> f64 {
        self.joint_entropy((true, true, false)) + self.joint_entropy((true, false, true))
            - self.joint_entropy((true, false, false))
            - self.joint_entropy((true, true, true))
    }

    fn cmi_t_given_v(&self) -> f64 {
        self.joint_entropy((true, true, false)) + self.joint_entropy((false, true, true))
            - self.joint_entropy((false, true, false))
            - self.joint_entropy((true, true, true))
    }

    fn induced(p: &JointDistribution, gt: &[usize], gv: &[usize], k: usize) -> Oracle {
        let mut q = vec![0.0; k * k * p.label_size];
        for t in 0..p.text_size {
            for v in 0..p.image_size {
                for y in 0..p.label_size {
                    q[(gt[t] * k + gv[v]) * p.label_size + y] += p.get(t, v, y);
                }
            }
        }
        Oracle {
            sizes: (k, k, p.label_size),
            p: q,
        }
    }
}

fn all_maps(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut i| {
            (0..n)
                .map(|_| {
                    let d = i % k;
                    i /= k;
                    d
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_3_proof_step_identities() {
    let k = 3;
    let maps = all_maps(3, k);
    let (mut chain, mut dpi, mut cmi, mut route) = (0.0f64, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    let mut cases = 0;
    for p in random_joints() {
        let x = Oracle {
            sizes: (3, 3, 2),
            p: p.probabilities.clone(),
        };
        let (ixt, ixv) = (x.mi(true, false), x.mi(false, true));
        for mt in &maps {
            for mv in &maps {
                let gt = DeterministicEncoder::new(mt.clone(), k).unwrap();
                let gv = DeterministicEncoder::new(mv.clone(), k).unwrap();
                let r = verify_theorem(&p, &gt, &gv).unwrap();
                let z = Oracle::induced(&p, mt, mv, k);
                let (izt, izv, iz) = (z.mi(true, false), z.mi(false, true), z.mi(true, true));
                let (c_vt, c_tv) = (z.cmi_v_given_t(), z.cmi_t_given_v());
                // chain rule on the oracle route and the library route
                chain = chain
                    .max((iz - (izt + c_vt)).abs())
                    .max((iz - (izv + c_tv)).abs())
                    .max(r.chain_rule_residual);
                // the two routes agree
                route = route
                    .max((r.i_z_y - iz).abs())
                    .max((r.i_zt_y - izt).abs())
                    .max((r.i_zv_y - izv).abs())
                    .max((r.i_zv_y_given_zt - c_vt).abs());
                dpi = dpi.max(izt - ixt).max(izv - ixv).max(r.dpi_excess);
                if r.aligned || r.bijection {
                    cmi = cmi.max(c_vt.abs()).max(c_tv.abs()).max(r.i_zv_y_given_zt.abs());
                }
                cases += 1;
            }
        }
    }
    let pass = chain <= 1e-12 && dpi <= 1e-12 && cmi <= 1e-12 && route <= 1e-12;
    report(
        3,
        pass,
        format!(
            "{cases} cases: chain-rule residual {chain:.1e}, max DPI excess {dpi:.1e}, \
             aligned-case conditional MI {cmi:.1e}, oracle/library disagreement {route:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn eval(f: impl FnOnce(&mut Graph) -> modality_lab::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.scalar(v)
}

#[test]
fn criterion_4_closed_form_values() {
    let e = [[1.0, 0.0], [0.0, 1.0]];
    let basis = || m(&[&e[0], &e[1]]);
    // softmax of [1, 0] at the positive, averaged over the two symmetric rows
    let nce_oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let nce = eval(|g| {
        let a = g.leaf(basis());
        losses::nce_term(g, a, a, a, 1.0)
    });

    let uni_same_oracle = (8.0f64 / 2.0).ln();
    let uni_same = eval(|g| {
        let a = g.leaf(m(&[&[1.0, 0.0], &[1.0, 0.0]]));
        let b = g.leaf(m(&[&[1.0, 0.0], &[1.0, 0.0]]));
        losses::l_uniformity(g, a, b, 2.0)
    });
    // two diagonal ones per modality plus two off-diagonal exp(-2 * 4)
    let uni_anti_oracle = ((2.0 * (2.0 + 2.0 * (-8f64).exp())) / 2.0).ln();
    let uni_anti = eval(|g| {
        let a = g.leaf(m(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let b = g.leaf(m(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        losses::l_uniformity(g, a, b, 2.0)
    });

    let gc = eval(|g| {
        let v = g.leaf(basis());
        let t = g.leaf(m(&[&[1.0, 0.0], &[1.0, 0.0]]));
        losses::l_gc(g, v, t)
    });

    let mut g = Graph::new();
    let v = g.leaf(m(&[&[1.0, 0.0]]));
    let t = g.leaf(m(&[&[0.0, 1.0]]));
    let mu = losses::bridge_mean(&mut g, v, t, 0.25).unwrap();
    let mu = g.value(mu).data().to_vec();
    let norm = (0.25f64 * 0.25 + 0.75 * 0.75).sqrt();
    let mu_oracle = [0.25 / norm, 0.75 / norm];
    let br = losses::l_bridge(&mut g, v, v, t, 0.25).unwrap();
    let br = g.scalar(br);
    let br_oracle = (1.0 - mu_oracle[0]).powi(2) + mu_oracle[1].powi(2);

    let checks = [
        ("nce_term", nce, nce_oracle, Some(0.31326)),
        ("l_uni identical", uni_same, uni_same_oracle, Some(1.3863)),
        ("l_uni antipodal", uni_anti, uni_anti_oracle, Some(0.6935)),
        ("l_gc", gc, 2.0, Some(2.0)),
        ("bridge mean x", mu[0], mu_oracle[0], Some(0.3162)),
        ("bridge mean y", mu[1], mu_oracle[1], Some(0.9487)),
        ("l_br", br, br_oracle, Some(1.3675)),
    ];
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (name, got, oracle, rounded) in checks {
        let err = (got - oracle).abs();
        worst = worst.max(err);
        // the tabulated value is the oracle rounded to its printed digits
        let rounded_ok = rounded.is_none_or(|r| (oracle - r).abs() <= 5e-5);
        if err > 1e-6 || !rounded_ok {
            println!("  {name}: got {got}, oracle {oracle}");
            pass = false;
        }
    }
    report(4, pass, format!("{} closed-form values, worst deviation {worst:.1e}", checks.len()));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn unit_fields(n: usize, d: usize, seed: u64) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let base = draw(n * d);
    let fields: Vec<Tensor> = (0..8)
        .map(|_| {
            let noise = draw(n * d);
            let data = base.iter().zip(&noise).map(|(b, e)| b + 0.6 * e).collect();
            Tensor::matrix(n, d, data).unwrap().normalize_rows().unwrap()
        })
        .collect();
    FeatureBundle::from_fields(fields.try_into().unwrap()).unwrap()
}

fn map_fields(b: &FeatureBundle, f: impl Fn(&Tensor) -> Tensor) -> FeatureBundle {
    let fields: Vec<Tensor> = b.fields().into_iter().map(f).collect();
    FeatureBundle::from_fields(fields.try_into().unwrap()).unwrap()
}

fn random_rotation(d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let data = (0..d).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    Tensor::matrix(d, d, data).unwrap()
}

fn breakdown(b: &FeatureBundle) -> LossBreakdown {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    losses::evaluate_total(b, &LossWeights::default(), &mut rng).unwrap()
}

fn terms(b: &LossBreakdown) -> Vec<(&'static str, f64)> {
    let mut t = b.named_terms().to_vec();
    t.push(("l_sep", b.l_sep));
    t
}

/// `|a - b| <= tol * max(1, |a|)`; values near the clamp reach 1e6.
fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(1.0)
}

#[test]
fn criterion_5_loss_invariants() {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let strategy = (2usize..=10, 2usize..=12, any::<u64>(), any::<u64>(), any::<u64>());
    let outcome = runner.run(&strategy, |(n, d, seed, perm_seed, rot_seed)| {
        let b = unit_fields(n, d, seed);
        let base = breakdown(&b);

        for (name, v) in terms(&base) {
            prop_assert!(v >= 0.0, "{name} = {v} is negative");
        }
        prop_assert!(base.l_uni_i >= std::f64::consts::LN_2 - 1e-12, "l_uni_i = {}", base.l_uni_i);

        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = breakdown(&map_fields(&b, |t| t.select_rows(&perm)));
        for ((name, a), (_, p)) in terms(&base).into_iter().zip(terms(&permuted)) {
            prop_assert!(close(a, p, 1e-12), "{name}: {a} vs permuted {p}");
        }

        let q = random_rotation(d, rot_seed);
        let rotated = breakdown(&map_fields(&b, |t| t.matmul(&q).unwrap()));
        for ((name, a), (_, r)) in terms(&base).into_iter().zip(terms(&rotated)) {
            prop_assert!(close(a, r, 1e-9), "{name}: {a} vs rotated {r}");
        }
        Ok(())
    });
    let pass = outcome.is_ok();
    report(
        5,
        pass,
        match &outcome {
            Ok(()) => "1000 randomized cases: nonnegativity, permutation (1e-12), rotation (1e-9), l_uni_i >= log 2"
                .to_string(),
            Err(e) => format!("{e}"),
        },
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6, 7 and 8

fn experiment(generate: GenConfig, loss: LossWeights) -> ExperimentConfig {
    ExperimentConfig {
        dataset_path: None,
        generate: Some(generate),
        encoder: EncoderSettings {
            hidden_widths: vec![64],
            embed_dim: 32,
        },
        loss,
        augment: AugmentConfig {
            noise_std: 0.1,
            dropout: 0.1,
            stream: 0,
        },
        optimizer: OptimizerConfig {
            step_size: 0.01,
            ..OptimizerConfig::default()
        },
        probe: ProbeConfig::default(),
        epochs: 30,
        batch_size: 128,
        splits: SplitFractions::default(),
        seed: 0,
        out_dir: None,
        checkpoint: None,
    }
}

fn gen_config(shared: f64, text: f64, image: f64, seed: u64) -> GenConfig {
    GenConfig {
        num_samples: 5000,
        num_classes: 4,
        text_dim: 32,
        image_dim: 32,
        shared_strength: shared,
        text_strength: text,
        image_strength: image,
        noise_std: 0.5,
        seed,
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn sweep_spec() -> SweepSpec {
    SweepSpec {
        lambda_align: vec![0.0, 0.1, 1.0, 10.0],
        seeds: SEEDS.to_vec(),
        base: experiment(gen_config(1.0, 0.5, 0.5, 7), LossWeights::contrastive_only()),
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
}

struct RegularizerRun {
    csv: String,
    baseline_probe: f64,
    regularized_probe: f64,
    r1_gain: f64,
    elapsed: Duration,
}

fn mean_r1(m: &modality_lab::metrics::MetricsReport) -> f64 {
    (m.r_at_1_i2t + m.r_at_1_t2i) / 2.0
}

/// Contrastive-only vs contrastive + separation on the imbalanced dataset.
fn regularizer_comparison() -> RegularizerRun {
    let start = Instant::now();
    let gen = gen_config(0.5, 1.0, 0.3, 11);
    let data = generate(&gen).unwrap();
    let mut csv = String::from("seed,variant,features,linear_probe_acc,r_at_1_i2t,r_at_1_t2i\n");
    let (mut base_sum, mut reg_sum, mut gain_sum) = (0.0, 0.0, 0.0);
    for seed in SEEDS {
        let mut con = experiment(gen.clone(), LossWeights::contrastive_only());
        con.seed = seed;
        let mut sep = con.clone();
        sep.loss.lambda_sep = 1.0;

        let a = train(&con, &data).unwrap();
        let pa = probe_accuracy(&a.model, &data, &a.splits, &con.probe, ProbeFeatures::Shared).unwrap();
        let b = train(&sep, &data).unwrap();
        let pb = probe_accuracy(&b.model, &data, &b.splits, &sep.probe, ProbeFeatures::SharedAndIndependent).unwrap();
        for (variant, features, acc, m) in [
            ("con", "shared", pa, &a.metrics),
            ("con+sep", "shared+independent", pb, &b.metrics),
        ] {
            csv.push_str(&format!(
                "{seed},{variant},{features},{acc},{},{}\n",
                m.r_at_1_i2t, m.r_at_1_t2i
            ));
        }
        base_sum += pa;
        reg_sum += pb;
        gain_sum += mean_r1(&b.metrics) - mean_r1(&a.metrics);
    }
    let k = SEEDS.len() as f64;
    RegularizerRun {
        csv,
        baseline_probe: base_sum / k,
        regularized_probe: reg_sum / k,
        r1_gain: gain_sum / k,
        elapsed: start.elapsed(),
    }
}

#[test]
fn criteria_6_7_8_training_experiments() {
    let spec = sweep_spec();
    let sweep_data = generate(spec.base.generate.as_ref().unwrap()).unwrap();

    let start = Instant::now();
    let sweep = run_sweep(&spec, &sweep_data, jobs()).unwrap();
    let sweep_elapsed = start.elapsed();
    let sweep_csv = sweep.csv();
    println!("{sweep_csv}");

    let reg = regularizer_comparison();
    println!("{}", reg.csv);

    // 7
    let probe_gain = reg.regularized_probe - reg.baseline_probe;
    let pass7 = probe_gain >= 0.02 && reg.elapsed < Duration::from_secs(15 * 60);
    report(
        7,
        pass7,
        format!(
            "probe accuracy con-only shared {:.4} vs con+sep shared+independent {:.4}: gain {:+.4} \
             (need >= +0.0200), {:.0}s",
            reg.baseline_probe,
            reg.regularized_probe,
            probe_gain,
            reg.elapsed.as_secs_f64()
        ),
    );

    // 6
    let gap0 = sweep.mean_at(0.0, |r| r.paired_gap).unwrap();
    let gap10 = sweep.mean_at(10.0, |r| r.paired_gap).unwrap();
    let r1: Vec<f64> = spec
        .lambda_align
        .iter()
        .map(|&l| sweep.mean_at(l, |r| (r.r_at_1_i2t + r.r_at_1_t2i) / 2.0).unwrap())
        .collect();
    let r1_range = r1.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r1.iter().cloned().fold(f64::INFINITY, f64::min);
    let gap_ok = gap10 < 0.5 * gap0;
    let decoupled = r1_range < reg.r1_gain;
    let pass6 = gap_ok && decoupled && sweep_elapsed < Duration::from_secs(15 * 60);
    report(
        6,
        pass6,
        format!(
            "mean paired gap {gap0:.4} at lambda 0 vs {gap10:.4} at lambda 10 (ratio {:.3}, need < 0.5); \
             R@1 range across lambdas {r1_range:.4} vs regularizer R@1 gain {:+.4}; {} cells in {:.0}s",
            gap10 / gap0,
            reg.r1_gain,
            sweep.rows.len(),
            sweep_elapsed.as_secs_f64()
        ),
    );

    // 8
    let sweep_again = run_sweep(&spec, &sweep_data, 1).unwrap().csv();
    let reg_again = regularizer_comparison().csv;
    let pass8 = sweep_again == sweep_csv && reg_again == reg.csv;
    report(
        8,
        pass8,
        format!(
            "sweep CSV ({} bytes, rerun with a different worker count) and regularizer CSV ({} bytes) {}",
            sweep_csv.len(),
            reg.csv.len(),
            if pass8 { "byte-identical" } else { "differ" }
        ),
    );

    assert!(pass6, "criterion 6");
    assert!(pass7, "criterion 7");
    assert!(pass8, "criterion 8");
}

// ---------------------------------------------------------------- 9

fn small_dataset() -> PairedDataset {
    generate(&GenConfig {
        num_samples: 12,
        num_classes: 3,
        text_dim: 5,
        image_dim: 4,
        shared_strength: 1.0,
        text_strength: 0.5,
        image_strength: 0.2,
        noise_std: 0.3,
        seed: 99,
    })
    .unwrap()
}

fn small_model() -> TwoTowerModel {
    TwoTowerModel::new(EncoderConfig {
        text_input_dim: 5,
        image_input_dim: 4,
        hidden_widths: vec![6, 3],
        embed_dim: 4,
        seed: 5,
    })
    .unwrap()
}

/// Every truncation, a trailing byte, a replaced magic, and three flips of
/// every byte. Corruptions that `must_fail` (and all truncations) have to come
/// back as format errors; the rest may decode but must never panic.
fn corruption_sweep<T>(
    bytes: &[u8],
    must_fail: impl Fn(usize) -> bool,
    decode: impl Fn(&[u8]) -> modality_lab::Result<T>,
) -> (usize, usize) {
    let (mut format_errors, mut other) = (0, 0);
    let mut check = |input: &[u8], required: bool| match catch_unwind(AssertUnwindSafe(|| decode(input))) {
        Ok(Err(Error::Format { .. })) => format_errors += 1,
        Ok(Ok(_)) if !required => {}
        _ => other += 1,
    };
    for len in 0..bytes.len() {
        check(&bytes[..len], true);
    }
    let mut extended = bytes.to_vec();
    extended.push(0);
    check(&extended, true);
    let mut bad_magic = bytes.to_vec();
    bad_magic[..4].copy_from_slice(b"XXXX");
    check(&bad_magic, true);
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut c = bytes.to_vec();
            c[i] ^= flip;
            check(&c, must_fail(i));
        }
    }
    (format_errors, other)
}

#[test]
fn criterion_9_round_trips_and_corruption() {
    let d = small_dataset();
    let bytes = encode_dataset(&d);
    let back = decode_dataset(&bytes).unwrap();
    let data_exact = back.text.data().iter().zip(d.text.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.image.data().iter().zip(d.image.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.labels == d.labels
        && encode_dataset(&back) == bytes;

    let model = small_model();
    let cbytes = encode_checkpoint(&model);
    let cback = decode_checkpoint(&cbytes).unwrap();
    let ckpt_exact = cback.config == model.config
        && cback.temperature.to_bits() == model.temperature.to_bits()
        && cback
            .parameters()
            .iter()
            .zip(model.parameters())
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        && encode_checkpoint(&cback) == cbytes;

    // Magic, version, N, D_T and D_V all feed size checks. A changed class
    // count may still cover every label.
    let (d_fmt, d_other) = corruption_sweep(&bytes, |i| i < 24, decode_dataset);
    // Magic, version, widths and layer count fix the parameter size; seed and
    // temperature (bytes 32..48) may change to other valid values.
    let (c_fmt, c_other) = corruption_sweep(&cbytes, |i| i < 32, decode_checkpoint);

    let pass = data_exact && ckpt_exact && d_other == 0 && c_other == 0;
    report(
        9,
        pass,
        format!(
            "bit-exact round trips (dataset {data_exact}, checkpoint {ckpt_exact}); corrupted inputs rejected \
             with format errors: dataset {d_fmt}, checkpoint {c_fmt}; panics or wrong error kinds: {}",
            d_other + c_other
        ),
    );
    assert!(pass);
}
