use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use vin_core::io;
use vin_core::physics::{
    make_pixel_dataset, make_state_dataset, read_dataset, write_pixel_dataset, write_state_dataset,
    Dataset, PixelDataset, StateDataset, FRAME_SIDE,
};
use vin_core::pixelvae::{
    embed_frames, evaluate_pixels, forecast_pixels, load_pixel_model, save_pixel_model, train_vae,
    write_embedding_csv, PixelKind, PixelModel, FRAME_RATE,
};
use vin_core::rng::{derive_seed, DATA};
use vin_core::statespace::{
    evaluate, evaluation_trajectories, forecast, load_state_fit, save_state_fit, train_mle,
    write_metrics_csv, Metrics, StateSpaceFit,
};

use crate::config::{ExperimentConfig, ModelSpec};
use crate::error::{CliError, Result};

/// A parsed config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf, seed: Option<u64>, workers: usize) -> Self {
        let mut config = config;
        if let Some(s) = seed {
            config.seeds = vec![s];
        }
        Self { config, out, workers: workers.max(1) }
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.out.join("data").join(format!("seed-{seed}"))
    }

    pub fn model_dir(&self, model: &ModelSpec, seed: u64) -> PathBuf {
        self.out.join("models").join(model.slug()).join(format!("seed-{seed}"))
    }

    fn jobs(&self) -> Vec<(ModelSpec, u64)> {
        let c = &self.config;
        c.models.iter().flat_map(|m| c.seeds.iter().map(move |&s| (m.clone(), s))).collect()
    }

    /// Jobs whose model can be rolled forward; the plain VAE only embeds.
    fn forecast_jobs(&self) -> Vec<(ModelSpec, u64)> {
        let mut jobs = self.jobs();
        jobs.retain(|(m, _)| !(self.config.is_pixel() && m.kind == PixelKind::Vae2d.name()));
        jobs
    }
}

/// The dataset of a trial is generated from this seed, so trials never
/// share trajectories.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, DATA)
}

/// Runs `f` over `tasks` on `workers` threads; results keep task order and
/// the first failing task's error is returned.
fn pool<T: Sync, R: Send>(workers: usize, tasks: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(tasks.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let r = f(task);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        io::ensure_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

/// Writes the dataset of every seed.
pub fn generate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let spec = c.spec();
    pool(ctx.workers, &c.seeds, |&seed| {
        let dir = ctx.data_dir(seed);
        if let Some(cfg) = c.state_data(data_seed(seed)) {
            write_state_dataset(&dir, &make_state_dataset(&spec, &cfg)?)?;
        } else if let Some(cfg) = c.pixel_data(data_seed(seed)) {
            write_pixel_dataset(&dir, &make_pixel_dataset(&spec, &cfg)?)?;
        }
        Ok(dir)
    })
}

fn state_dataset(ctx: &Context, seed: u64) -> Result<StateDataset> {
    match read_dataset(&ctx.data_dir(seed))? {
        Dataset::State(d) => Ok(d),
        Dataset::Pixel(_) => Err(CliError::Config(format!(
            "seed {seed}: found pixel data where the config expects state data"
        ))),
    }
}

fn pixel_dataset(ctx: &Context, seed: u64) -> Result<PixelDataset> {
    match read_dataset(&ctx.data_dir(seed))? {
        Dataset::Pixel(d) => Ok(d),
        Dataset::State(_) => Err(CliError::Config(format!(
            "seed {seed}: pixel models need pixel data, found state data"
        ))),
    }
}

/// Fits every model on every seed's dataset and writes a checkpoint plus
/// `train_log.csv` per run.
pub fn train(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    pool(ctx.workers, &ctx.jobs(), |(model, seed)| {
        let dir = ctx.model_dir(model, *seed);
        let mut log = String::new();
        if c.is_pixel() {
            let mut ds = pixel_dataset(ctx, *seed)?;
            if let Some(n) = c.train_frames() {
                ds = ds.truncated(n);
            }
            let fit = train_vae(&ds, model.pixel_kind()?, &c.pixel_hyper(model, *seed))?;
            save_pixel_model(&dir, &fit)?;
            log.push_str("epoch,elbo\n");
            for (i, e) in fit.elbo_log.iter().enumerate() {
                writeln!(log, "{},{e}", i + 1).expect("string write");
            }
        } else {
            let ds = state_dataset(ctx, *seed)?;
            let hyper = c.state_hyper(model, *seed);
            let fit = train_mle(&ds, model.state_kind()?, &hyper)?;
            save_state_fit(&dir, &fit, &hyper)?;
            log.push_str("step,loss\n");
            for (i, l) in fit.loss_log.iter().enumerate() {
                writeln!(log, "{},{l}", i + 1).expect("string write");
            }
            let mut sel = String::from("steps,heldout_loglik,selected\n");
            for g in &fit.selection {
                writeln!(sel, "{},{},{}", g.steps, g.heldout_loglik, g.steps == fit.selected_steps)
                    .expect("string write");
            }
            write_text(&dir.join("selection.csv"), &sel)?;
        }
        write_text(&dir.join("train_log.csv"), &log)?;
        Ok(dir)
    })
}

fn load_state(ctx: &Context, model: &ModelSpec, seed: u64) -> Result<StateSpaceFit> {
    let dir = ctx.model_dir(model, seed);
    let header: vin_core::models::CheckpointHeader = io::read_json(&dir.join("manifest.json"))?;
    if header.family != "state" {
        return Err(CliError::Config(format!("{}: not a state-space checkpoint", dir.display())));
    }
    Ok(load_state_fit(&dir)?.1)
}

fn load_pixel(ctx: &Context, model: &ModelSpec, seed: u64) -> Result<PixelModel> {
    let dir = ctx.model_dir(model, seed);
    let header: vin_core::models::CheckpointHeader = io::read_json(&dir.join("manifest.json"))?;
    if header.family != "pixel" {
        return Err(CliError::Config(format!(
            "{}: state-space checkpoints have no latent embedding",
            dir.display()
        )));
    }
    Ok(load_pixel_model(&dir)?.1)
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Scores every checkpoint and writes per-run metrics plus a summary over
/// seeds. State data: one metrics CSV per held-out initial condition,
/// `summary.csv` and `summary_stats.csv`. Pixel data: `pixel_seeds.csv`
/// and `table1.csv`. A zero horizon writes header-only files.
pub fn evaluate_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let horizon = c.horizon();
    let dir = ctx.out.join("metrics");
    io::ensure_dir(&dir)?;
    let jobs = ctx.forecast_jobs();
    if c.is_pixel() {
        let rows = pool(ctx.workers, &jobs, |(model, seed)| {
            let ds = pixel_dataset(ctx, *seed)?;
            let need = (horizon * FRAME_RATE).round() as usize;
            if need > ds.n_frames() {
                return Err(CliError::Config(format!(
                    "horizon {horizon} s needs {need} frames but the data has {}",
                    ds.n_frames()
                )));
            }
            if horizon == 0.0 {
                return Ok(None);
            }
            let m = evaluate_pixels(&load_pixel(ctx, model, *seed)?, &ds.frames, horizon)?;
            Ok(Some((model.slug(), *seed, m.rmse, m.loglik)))
        })?;
        let rows: Vec<_> = rows.into_iter().flatten().collect();
        let mut per = String::from("model,seed,rmse,loglik\n");
        for (m, s, r, l) in &rows {
            writeln!(per, "{m},{s},{r},{l}").expect("string write");
        }
        let mut table = String::from(
            "model,n_seeds,rmse_mean,rmse_se,loglik_mean,loglik_se,loglik_e2_mean,loglik_e2_se\n",
        );
        for model in &c.models {
            let mine: Vec<_> = rows.iter().filter(|r| r.0 == model.slug()).collect();
            if mine.is_empty() {
                continue;
            }
            let (rm, rs) = mean_se(&mine.iter().map(|r| r.2).collect::<Vec<_>>());
            let (lm, ls) = mean_se(&mine.iter().map(|r| r.3).collect::<Vec<_>>());
            writeln!(table, "{},{},{rm},{rs},{lm},{ls},{},{}", model.slug(), mine.len(), lm * 1e-2, ls * 1e-2)
                .expect("string write");
        }
        let (a, b) = (dir.join("pixel_seeds.csv"), dir.join("table1.csv"));
        write_text(&a, &per)?;
        write_text(&b, &table)?;
        return Ok(vec![a, b]);
    }

    let spec = c.spec();
    let n_eval = c.evaluate.n_eval;
    let rows = pool(ctx.workers, &jobs, |(model, seed)| {
        let ds = state_dataset(ctx, *seed)?;
        let fit = load_state(ctx, model, *seed)?;
        let truths = evaluation_trajectories(&spec, &ds.config, n_eval, horizon)?;
        let metrics: Vec<Metrics> = if horizon == 0.0 {
            vec![Metrics { t: vec![], rmse: vec![], cum_rmse: vec![], energy: vec![] }; n_eval]
        } else {
            let inits: Vec<_> = truths.iter().map(|t| t.initial_state()).collect();
            let preds = forecast(&fit, &inits, horizon)?;
            preds.iter().zip(&truths).map(|(p, t)| evaluate(&spec, p, t)).collect::<Result<_, _>>()?
        };
        let mdir = dir.join(model.slug());
        io::ensure_dir(&mdir)?;
        for (i, m) in metrics.iter().enumerate() {
            write_metrics_csv(&mdir.join(format!("seed-{seed}-ic-{i}.csv")), m, &model.slug(), *seed)?;
        }
        let cum = metrics.iter().map(Metrics::final_cum_rmse).sum::<f64>() / n_eval as f64;
        let band = metrics.iter().map(Metrics::energy_band).sum::<f64>() / n_eval as f64;
        Ok((model.slug(), *seed, cum, band))
    })?;
    let mut summary = String::from("model,seed,cum_rmse,energy_band\n");
    for (m, s, cum, band) in &rows {
        writeln!(summary, "{m},{s},{cum},{band}").expect("string write");
    }
    let mut stats =
        String::from("model,n_seeds,cum_rmse_mean,cum_rmse_se,energy_band_mean,energy_band_se\n");
    for model in &c.models {
        let mine: Vec<_> = rows.iter().filter(|r| r.0 == model.slug()).collect();
        let (cm, cs) = mean_se(&mine.iter().map(|r| r.2).collect::<Vec<_>>());
        let (bm, bs) = mean_se(&mine.iter().map(|r| r.3).collect::<Vec<_>>());
        writeln!(stats, "{},{},{cm},{cs},{bm},{bs}", model.slug(), mine.len()).expect("string write");
    }
    let (a, b) = (dir.join("summary.csv"), dir.join("summary_stats.csv"));
    write_text(&a, &summary)?;
    write_text(&b, &stats)?;
    Ok(vec![a, b])
}

fn path_csv(out: &mut String, t0: usize, rows: &vin_core::diff::Tensor, h: f64, ic: usize) {
    for i in 0..rows.dims2().0 {
        writeln!(out, "{},{},{},{ic}", (t0 + i) as f64 * h, rows.at(i, 0), rows.at(i, 1)).expect("string write");
    }
}

/// Rolls every checkpoint forward for the configured forecast horizon.
/// State data: predicted and true `(q, q')` paths per held-out initial
/// condition. Pixel data: predicted frames in the binary container, the
/// latent path, and `latent_norms.csv` with `max_t |x_t| / |x_1|`.
pub fn forecast_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let duration = c.evaluate.forecast_horizon;
    let root = ctx.out.join("forecast");
    io::ensure_dir(&root)?;
    let jobs = ctx.forecast_jobs();
    if c.is_pixel() {
        let rows = pool(ctx.workers, &jobs, |(model, seed)| {
            let ds = pixel_dataset(ctx, *seed)?;
            let f = forecast_pixels(&load_pixel(ctx, model, *seed)?, &ds.frames, duration)?;
            let dir = root.join(model.slug()).join(format!("seed-{seed}"));
            io::ensure_dir(&dir)?;
            let n = f.frames.dims2().0;
            io::write_tensor(&dir.join("frames.bin"), &f.frames)?;
            io::write_json(
                &dir.join("manifest.json"),
                &serde_json::json!({
                    "format": "vin-forecast/1",
                    "model": model.slug(),
                    "seed": seed,
                    "frames_shape": [1, n, FRAME_SIDE, FRAME_SIDE],
                    "h": 1.0 / FRAME_RATE,
                    "duration": duration,
                    "norm_ratio": f.norm_ratio(),
                    "clamp_events": f.clamp_events,
                }),
            )?;
            let mut lat = String::from("t,x1,x2\n");
            for i in 0..n {
                writeln!(lat, "{},{},{}", i as f64 / FRAME_RATE, f.latent.at(i, 0), f.latent.at(i, 1))
                    .expect("string write");
            }
            write_text(&dir.join("latent.csv"), &lat)?;
            Ok((model.slug(), *seed, f.norm_ratio(), f.clamp_events))
        })?;
        let mut norms = String::from("model,seed,norm_ratio,clamp_events\n");
        for (m, s, r, k) in rows {
            writeln!(norms, "{m},{s},{r},{k}").expect("string write");
        }
        let p = root.join("latent_norms.csv");
        write_text(&p, &norms)?;
        return Ok(vec![p]);
    }

    let spec = c.spec();
    let n_eval = c.evaluate.n_eval;
    let mut written = pool(ctx.workers, &jobs, |(model, seed)| {
        let ds = state_dataset(ctx, *seed)?;
        let fit = load_state(ctx, model, *seed)?;
        let truths = evaluation_trajectories(&spec, &ds.config, n_eval, duration)?;
        let inits: Vec<_> = truths.iter().map(|t| t.initial_state()).collect();
        let mut out = String::from("t,q,qdot,ic\n");
        for (i, p) in forecast(&fit, &inits, duration)?.iter().enumerate() {
            path_csv(&mut out, 0, p, fit.h, i);
        }
        let p = root.join(model.slug()).join(format!("seed-{seed}.csv"));
        write_text(&p, &out)?;
        Ok(p)
    })?;
    for &seed in &c.seeds {
        let ds = state_dataset(ctx, seed)?;
        let truths = evaluation_trajectories(&spec, &ds.config, n_eval, duration)?;
        let mut out = String::from("t,q,qdot,ic\n");
        for (i, t) in truths.iter().enumerate() {
            path_csv(&mut out, 0, &t.states, t.h, i);
        }
        let p = root.join("truth").join(format!("seed-{seed}.csv"));
        write_text(&p, &out)?;
        written.push(p);
    }
    Ok(written)
}

/// Per-frame latent coordinates of every frame of each seed's pixel data,
/// labelled train or test by `data.train_frames`.
pub fn export_latent(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    if !c.is_pixel() {
        return Err(CliError::Config(
            "export-latent needs a pixel config; state-space models have no encoder".into(),
        ));
    }
    pool(ctx.workers, &ctx.jobs(), |(model, seed)| {
        let ds = pixel_dataset(ctx, *seed)?;
        let n_train = c.train_frames().unwrap_or(ds.n_frames());
        let rows = embed_frames(&load_pixel(ctx, model, *seed)?, &ds.frames, n_train)?;
        let p = ctx.out.join("latent").join(model.slug()).join(format!("seed-{seed}.csv"));
        io::ensure_dir(p.parent().expect("nested path"))?;
        write_embedding_csv(&p, &rows)?;
        Ok(p)
    })
}
