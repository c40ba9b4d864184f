use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use dpml_core::accountant::{
    hyperparam_search_budget, noise_for_target, strong_composition_epsilon, AccountantError, IntegrationConfig,
    MomentsAccountant, PrivacySpend, SampledGaussianStep,
};
use dpml_core::data::{load_idx, mnist_paths, synthetic_blobs, Dataset};
use dpml_core::dppca::{dp_pca, PcaOutcome, ProjectionMatrix};
use dpml_core::dpsgd::{self, clip_norm_diagnostic, ClipSpec, LrSchedule, TrainingConfig, TrainingReport};
use dpml_core::mechanisms::NoiseSource;
use dpml_core::nn::MlpParams;

use crate::{BudgetArgs, ClipDiagnosticArgs, CliError, CurveArgs, DataArgs, PcaArgs, PcaFlags, Sink, TrainArgs};

const PCA_STREAM: u64 = 20;
const DIAGNOSTIC_STREAM: u64 = 30;

/// Blob examples whose index is `4 mod 5` form the test split.
const BLOB_TEST_EVERY: usize = 5;

fn curve_steps(a: &CurveArgs) -> Result<(SampledGaussianStep, u64), CliError> {
    let step = SampledGaussianStep::new(a.q, a.sigma)?;
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(CliError::Usage(format!("--delta must be in (0, 1), got {}", a.delta)));
    }
    let lots = match a.lots_per_epoch {
        Some(0) => return Err(CliError::Usage("--lots-per-epoch must be positive".into())),
        Some(n) => n,
        None if a.q > 0.0 => ((1.0 / a.q).round() as u64).max(1),
        None => return Err(CliError::Usage("--q 0 needs an explicit --lots-per-epoch".into())),
    };
    Ok((step, lots))
}

/// Moments-accountant epsilon at the end of each epoch `1..=epochs`.
fn moments_curve(a: &CurveArgs, step: SampledGaussianStep, lots: u64) -> Result<Vec<f64>, CliError> {
    let mut acc = MomentsAccountant::new(IntegrationConfig::default(), a.max_order)?;
    let moments = acc.step_moments(step)?.clone();
    let mut ledger = acc.empty_ledger();
    let mut out = Vec::with_capacity(a.epochs as usize);
    for _ in 0..a.epochs {
        ledger = ledger.accumulate_repeated(&moments, lots)?;
        out.push(ledger.get_epsilon(a.delta)?.spend.epsilon);
    }
    Ok(out)
}

pub fn accountant_curve(a: &CurveArgs, sink: &mut Sink) -> Result<(), CliError> {
    let (step, lots) = curve_steps(a)?;
    let eps = moments_curve(a, step, lots)?;
    let mut csv = String::from("epoch,T,epsilon_moments\n");
    for (i, e) in eps.iter().enumerate() {
        let epoch = i as u64 + 1;
        writeln!(csv, "{epoch},{},{e}", epoch * lots).expect("string write");
    }
    sink.emit(csv.as_bytes())
}

pub fn compare_composition(a: &CurveArgs, sink: &mut Sink) -> Result<(), CliError> {
    let (step, lots) = curve_steps(a)?;
    let eps = moments_curve(a, step, lots)?;
    let mut csv = String::from("epoch,eps_strong,eps_moments\n");
    for (i, e) in eps.iter().enumerate() {
        let epoch = i as u64 + 1;
        let strong = strong_composition_epsilon(a.q, a.sigma, a.delta, epoch * lots)?.epsilon;
        writeln!(csv, "{epoch},{strong},{e}").expect("string write");
    }
    sink.emit(csv.as_bytes())
}

pub fn budget(a: &BudgetArgs, sink: &mut Sink) -> Result<(), CliError> {
    let b = hyperparam_search_budget(a.epsilon, a.epsilon_prime, a.delta, a.p)?;
    let csv = format!(
        "epsilon,epsilon_prime,delta,p,total_epsilon,refined_epsilon,max_calls,accuracy_slack\n{},{},{},{},{},{},{},{}\n",
        a.epsilon, a.epsilon_prime, a.delta, a.p, b.total_epsilon, b.refined_epsilon, b.max_calls, b.accuracy_slack
    );
    sink.emit(csv.as_bytes())
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < d.len() => d.truncated(n),
        _ => d,
    }
}

/// Training set and, when available, a test set.
fn load_data(a: &DataArgs) -> Result<(Dataset, Option<Dataset>), CliError> {
    let (train, test) = match (&a.mnist, a.blobs) {
        (Some(_), true) => return Err(CliError::Usage("choose one of --mnist and --blobs".into())),
        (None, false) => return Err(CliError::Usage("choose a dataset with --mnist DIR or --blobs".into())),
        (Some(dir), false) => {
            let (ti, tl) = mnist_paths(dir, true);
            let train = load_idx(&ti, &tl)?;
            let (vi, vl) = mnist_paths(dir, false);
            let test = if vi.exists() && vl.exists() {
                Some(load_idx(&vi, &vl)?)
            } else {
                eprintln!("note: no test files in {}, reporting training accuracy only", dir.display());
                None
            };
            (train, test)
        }
        (None, true) => {
            let all = synthetic_blobs(a.blob_classes, a.blob_per_class, a.blob_dim, a.blob_separation, a.data_seed)?;
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, ex) in all.examples().iter().enumerate() {
                if i % BLOB_TEST_EVERY == BLOB_TEST_EVERY - 1 {
                    test.push(ex.clone());
                } else {
                    train.push(ex.clone());
                }
            }
            let test = if test.is_empty() {
                None
            } else {
                Some(Dataset::new(test, all.num_classes(), all.feature_dim())?)
            };
            (Dataset::new(train, all.num_classes(), all.feature_dim())?, test)
        }
    };
    Ok((limit(train, a.train_limit), test.map(|t| limit(t, a.test_limit))))
}

fn run_pca(train: &Dataset, p: &PcaFlags, seed: u64) -> Result<PcaOutcome, CliError> {
    if p.pca_dim == 0 || p.pca_dim > train.feature_dim() {
        return Err(CliError::Usage(format!(
            "--pca-dim must be in 1..={} for this data, got {} (or pass --no-pca)",
            train.feature_dim(),
            p.pca_dim
        )));
    }
    let rows: Vec<&[f64]> = train.examples().iter().map(|e| e.features.as_slice()).collect();
    let outcome = dp_pca(&rows, p.pca_dim, p.sigma_pca, p.pca_fraction, &mut NoiseSource::with_stream(seed, PCA_STREAM))?;
    if outcome.rank_ambiguous {
        eprintln!(
            "warning: eigengap {} at component {} is tiny; the projection is not well determined",
            outcome.eigengap, p.pca_dim
        );
    }
    Ok(outcome)
}

fn project(d: &Dataset, proj: &ProjectionMatrix) -> Result<Dataset, CliError> {
    if d.feature_dim() != proj.input_dim() {
        return Err(CliError::Usage(format!(
            "projection expects {} features, data has {}",
            proj.input_dim(),
            d.feature_dim()
        )));
    }
    Ok(d.map_features(proj.output_dim(), |x| proj.project(x).expect("dimension checked"))?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(format!("opening {}", path.display()), e))
}

fn save_projection(path: &Path, proj: &ProjectionMatrix) -> Result<(), CliError> {
    let mut w = create(path)?;
    proj.save(&mut w)?;
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn training_config(a: &TrainArgs) -> Result<TrainingConfig, CliError> {
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(CliError::Usage(format!("--delta must be in (0, 1), got {}", a.delta)));
    }
    let target = a.target_eps.map(|e| PrivacySpend::new(e, a.delta)).transpose()?;
    Ok(TrainingConfig {
        lot_size: a.lot,
        noise_sigma: a.sigma,
        clip: ClipSpec {
            thresholds: a.clip.0.clone(),
            whole_vector: a.whole_vector,
        },
        lr: LrSchedule {
            initial: a.lr,
            final_rate: a.lr_final,
            decay_epochs: a.lr_decay_epochs,
        },
        max_epochs: a.epochs,
        target,
        report_delta: a.delta,
        seed: a.seed,
        hidden: a.hidden.0.clone(),
    })
}

/// Rejects a target that the very first step would already exceed.
fn check_target_feasible(
    config: &TrainingConfig,
    q: f64,
    pca_charge: Option<SampledGaussianStep>,
    accountant: &mut MomentsAccountant,
) -> Result<(), CliError> {
    let Some(target) = config.target else {
        return Ok(());
    };
    let min_sigma = match noise_for_target(q, 1, target.epsilon, target.delta, accountant.config()) {
        Ok(s) => s,
        Err(AccountantError::Unachievable { sigma_max, .. }) => {
            return Err(CliError::Usage(format!(
                "target {target} is infeasible: one step at q={q} exceeds it even with sigma={sigma_max}"
            )))
        }
        Err(e) => return Err(e.into()),
    };
    if config.noise_sigma < min_sigma {
        return Err(CliError::Usage(format!(
            "target {target} is infeasible: one step at q={q} needs sigma >= {min_sigma:.3}, got {}",
            config.noise_sigma
        )));
    }
    let mut ledger = accountant.empty_ledger();
    if let Some(step) = pca_charge {
        ledger = accountant.accumulate(&ledger, step)?;
    }
    ledger = accountant.accumulate(&ledger, SampledGaussianStep::new(q, config.noise_sigma)?)?;
    let eps = ledger.get_epsilon(target.delta)?.spend.epsilon;
    if eps > target.epsilon {
        return Err(CliError::Usage(format!(
            "target {target} is infeasible: the PCA release plus one training step already costs epsilon={eps:.4}"
        )));
    }
    Ok(())
}

pub fn train(a: &TrainArgs, sink: &mut Sink) -> Result<(), CliError> {
    let config = training_config(a)?;
    let (mut train_set, mut test_set) = load_data(&a.data)?;
    config.validate(train_set.len())?;
    if a.projection_out.is_some() && a.no_pca {
        return Err(CliError::Usage("--projection-out needs PCA (drop --no-pca)".into()));
    }
    if !a.no_pca && config.is_private() && a.pca.sigma_pca == 0.0 {
        return Err(CliError::Usage(
            "--sigma-pca 0 releases the covariance without noise in a private run; use --no-pca or a positive --sigma-pca".into(),
        ));
    }

    let mut accountant = MomentsAccountant::default();
    let pca_charge = if !a.no_pca && a.pca.sigma_pca > 0.0 {
        Some(SampledGaussianStep::new(a.pca.pca_fraction, a.pca.sigma_pca)?)
    } else {
        None
    };
    let q = config.sampling_rate(train_set.len());
    check_target_feasible(&config, q, pca_charge, &mut accountant)?;

    let mut ledger = accountant.empty_ledger();
    if !a.no_pca {
        let outcome = run_pca(&train_set, &a.pca, a.seed)?;
        train_set = project(&train_set, &outcome.projection)?;
        test_set = test_set.map(|t| project(&t, &outcome.projection)).transpose()?;
        if let Some(path) = &a.projection_out {
            save_projection(path, &outcome.projection)?;
        }
        if let Some(step) = pca_charge {
            ledger = accountant.accumulate(&ledger, step)?;
        }
    }

    let dims = config.layer_dims(train_set.feature_dim(), train_set.num_classes());
    let params = MlpParams::glorot(&dims, config.seed)?;
    let outcome = dpsgd::train_from(params, ledger, &mut accountant, &train_set, test_set.as_ref(), &config)?;

    let mut csv = Vec::new();
    outcome
        .report
        .write_csv(&mut csv)
        .map_err(|e| CliError::io("formatting report", e))?;
    sink.emit(&csv)?;
    if let Some(path) = &a.checkpoint {
        let mut w = create(path)?;
        outcome.params.save(&mut w)?;
        w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }
    summarize(&outcome.report);
    Ok(())
}

fn summarize(report: &TrainingReport) {
    match report.records.last() {
        Some(r) => eprintln!(
            "stopped ({}) after {} steps, epoch {:.2}: train {:.4}, test {}, epsilon {} at delta {}",
            report.stop_reason,
            report.steps,
            r.epoch,
            r.train_accuracy,
            r.test_accuracy.map_or("n/a".into(), |t| format!("{t:.4}")),
            r.epsilon,
            r.delta
        ),
        None => eprintln!("stopped ({}) before the first step", report.stop_reason),
    }
}

pub fn pca(a: &PcaArgs, sink: &mut Sink) -> Result<(), CliError> {
    let (train_set, _) = load_data(&a.data)?;
    let outcome = run_pca(&train_set, &a.pca, a.seed)?;
    if let Some(path) = &a.projection_out {
        save_projection(path, &outcome.projection)?;
    }
    let mut csv = String::from("component,eigenvalue\n");
    for (i, v) in outcome.eigenvalues.iter().enumerate() {
        writeln!(csv, "{},{v}", i + 1).expect("string write");
    }
    sink.emit(csv.as_bytes())?;
    if a.pca.sigma_pca > 0.0 {
        let mut acc = MomentsAccountant::default();
        let eps = acc
            .epsilon_after(SampledGaussianStep::new(a.pca.pca_fraction, a.pca.sigma_pca)?, 1, a.delta)?
            .spend
            .epsilon;
        eprintln!(
            "released {} components from {} sampled rows; epsilon {eps} at delta {}",
            a.pca.pca_dim, outcome.rows_used, a.delta
        );
    } else {
        eprintln!("released {} components without noise (not private)", a.pca.pca_dim);
    }
    Ok(())
}

pub fn clip_diagnostic(a: &ClipDiagnosticArgs, sink: &mut Sink) -> Result<(), CliError> {
    let (mut train_set, _) = load_data(&a.data)?;
    if let Some(path) = &a.projection {
        train_set = project(&train_set, &ProjectionMatrix::load(&mut open(path)?)?)?;
    }
    let params = match &a.model {
        Some(path) => MlpParams::load(&mut open(path)?)?,
        None => {
            let dims: Vec<usize> = std::iter::once(train_set.feature_dim())
                .chain(a.hidden.0.iter().copied())
                .chain(std::iter::once(train_set.num_classes()))
                .collect();
            MlpParams::glorot(&dims, a.seed)?
        }
    };
    let mut rng = NoiseSource::with_stream(a.seed, DIAGNOSTIC_STREAM);
    let d = clip_norm_diagnostic(&params, train_set.examples(), a.sample_size, &mut rng)?;
    let mut csv = String::from("layer,median_norm\n");
    writeln!(csv, "all,{}", d.median_norm).expect("string write");
    for (i, m) in d.per_layer_median.iter().enumerate() {
        writeln!(csv, "{},{m}", i + 1).expect("string write");
    }
    sink.emit(csv.as_bytes())?;
    eprintln!("median per-example gradient norm {} over {} examples", d.median_norm, d.sample_size);
    Ok(())
}
