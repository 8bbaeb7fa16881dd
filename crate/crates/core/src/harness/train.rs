//! Training loop, evaluation, embedding snapshots and checkpoints.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use super::config::{KeyValues, TrainConfig};
use super::data::Dataset;
use super::metrics::{accuracy, auc, Metrics};
use super::model::{forward, is_shared, Batch, Contrast, Model, Prepared, Snapshot};
use crate::error::{Error, Result};
use crate::macl::{NegativeQueue, TemperatureState};
use crate::numerics::io::{read_named, read_str, write_named, write_str};
use crate::numerics::rng::{substream, Rng};
use crate::numerics::{Graph, Tensor};
use crate::pareto::{combine_stores, Branch, Optimizer};

pub const LOG_HEADER: &str = "step,L_m,L_u,L_C,tau,cos_theta,branch,alpha_m,acc";

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_m: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub tau: f64,
    /// `None` when the gradient combiner is off.
    pub cos_theta: Option<f64>,
    pub branch: &'static str,
    pub alpha_m: Option<f64>,
    pub acc: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.4}",
            self.step,
            self.l_m,
            self.l_u,
            self.l_c,
            self.tau,
            opt(self.cos_theta),
            self.branch,
            opt(self.alpha_m),
            self.acc
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Mean `L_m + L_u` over each epoch's steps.
    pub epoch_loss: Vec<f64>,
}

/// Batches of `idx` in order; the last one may be smaller.
pub fn batches(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Forward pass over `idx` in evaluation mode, returning projected embeddings.
pub fn snapshot(model: &mut Model, data: &Dataset, prep: &Prepared, idx: &[usize]) -> Result<Snapshot> {
    let mut rng = substream(model.cfg.seed, "snapshot");
    let (mut v, mut a, mut fake) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in batches(idx, model.cfg.batch_size) {
        let batch = Batch::gather::<Rng>(data, prep, &chunk, None)?;
        let mut g = Graph::new();
        let out = forward(&mut g, model, &batch, false, None, &mut rng)?;
        for i in 0..batch.len() {
            v.push(g.value(out.x_v).row(i));
            a.push(g.value(out.x_a).row(i));
        }
        fake.extend(batch.fake.iter().copied());
    }
    Ok(Snapshot {
        v: Tensor::stack(&v)?,
        a: Tensor::stack(&a)?,
        fake,
    })
}

/// Writes a diagnostic dump for a failed step and returns the error to raise.
fn dump_failure(dump: Option<&Path>, step: usize, epoch: usize, err: Error, model: &Model) -> Error {
    if let Some(path) = dump {
        let mut text = format!("step = {step}\nepoch = {epoch}\nerror = {err}\n");
        for (name, t) in model.params.iter() {
            let finite = t.all_finite();
            text.push_str(&format!("param {name} norm = {:.6e} finite = {finite}\n", t.norm()));
        }
        let _ = std::fs::write(path, text);
    }
    err
}

/// Trains `model` on the dataset's training split. Each row is also written
/// to `log` when given. A non-finite loss aborts with a dump at `dump`.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    prep: &Prepared,
    mut log: Option<&mut dyn Write>,
    dump: Option<&Path>,
) -> Result<TrainReport> {
    let cfg = model.cfg.clone();
    check_compatible(&cfg, data)?;
    if data.train.len() < 2 * cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} samples; need at least two batches of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer_kind()?);
    let mut temp = TemperatureState::new(&cfg.macl);
    let mut queue_v = NegativeQueue::new(cfg.macl.queue_size, cfg.macl.d_proj);
    let mut queue_a = NegativeQueue::new(cfg.macl.queue_size, cfg.macl.d_proj);
    let mut shuffle_rng = substream(cfg.seed, "shuffle");
    let mut view_rng = substream(cfg.seed, "views");
    let mut drop_rng = substream(cfg.seed, "dropout");
    let mut noise_rng = substream(cfg.seed, "pareto-noise");
    let mut report = TrainReport::default();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut step = 0;
    let mut order = data.train.clone();
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            let snap = snapshot(model, data, prep, &data.train)?;
            model.refit(snap)?;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in batches(&order, cfg.batch_size) {
            let row = (|| -> Result<LogRow> {
                let needs_views = cfg.flags.use_macl && cfg.flags.use_intra;
                let views = needs_views.then_some((cfg.view_noise, &mut view_rng));
                let batch = Batch::gather(data, prep, &chunk, views)?;
                let mut g = Graph::new();
                let ctx = Contrast {
                    temp: &temp,
                    queue_v: &queue_v,
                    queue_a: &queue_a,
                };
                let out = forward(&mut g, model, &batch, true, Some(ctx), &mut drop_rng)?;
                let (l_m, l_u) = (g.item(out.l_m), g.item(out.l_u));
                if !l_m.is_finite() || !l_u.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss (L_m = {l_m}, L_u = {l_u})")));
                }
                let gm = g.backward(out.l_m)?;
                let gu = g.backward(out.l_u)?;
                let pm = g.param_grads(&gm, &model.params);
                let pu = g.param_grads(&gu, &model.params);
                let pareto = cfg.flags.use_pareto.then_some(&cfg.pareto);
                let (grads, diag) = combine_stores(&pm, &pu, is_shared, pareto, Some(&mut noise_rng))?;
                opt.step(&mut model.params, &grads)?;
                let (l_c, tau) = match &out.macl {
                    Some(m) => {
                        let l_c = g.item(m.l_c);
                        temp.advance(&g, &gm, &m.smoothed);
                        // the temperature feeds both objectives
                        temp.grad += gu.get(m.smoothed.tau).map_or(0.0, Tensor::item);
                        (l_c, temp.tau)
                    }
                    None => (0.0, temp.tau),
                };
                queue_v.push(g.value(out.x_v), &batch.tags)?;
                queue_a.push(g.value(out.x_a), &batch.tags)?;
                let probs = g.value(out.prob).data().to_vec();
                Ok(LogRow {
                    step,
                    epoch,
                    l_m,
                    l_u,
                    l_c,
                    tau,
                    cos_theta: diag.map(|d| d.cos_theta),
                    branch: diag.map_or("off", |d| d.branch.name()),
                    alpha_m: diag.map(|d| match d.branch {
                        Branch::Zero => 0.5,
                        _ => d.alpha_m,
                    }),
                    acc: accuracy(&probs, &batch.labels, 0.5),
                })
            })()
            .map_err(|e| dump_failure(dump, step, epoch, e, model))?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            epoch_total += row.l_m + row.l_u;
            epoch_steps += 1;
            report.rows.push(row);
            step += 1;
        }
        report.epoch_loss.push(epoch_total / epoch_steps as f64);
    }
    // clusters used at evaluation time come from the final weights
    let snap = snapshot(model, data, prep, &data.train)?;
    model.refit(snap)?;
    Ok(report)
}

fn check_compatible(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let e = &cfg.encoder;
    let d = &data.cfg;
    if (e.frames, e.height, e.width, e.channels) != (d.frames, d.height, d.width, 3) {
        return Err(Error::Config(format!(
            "model expects {}x{}x{}x{} video, data has {}x3x{}x{}",
            e.frames, e.channels, e.height, e.width, d.frames, d.height, d.width
        )));
    }
    let mel = crate::audio::MelConfig::default();
    if mel.n_frames(d.audio_len) != e.mel_frames || mel.n_mels != e.n_mels {
        return Err(Error::Config(format!(
            "audio of {} samples gives {} mel frames, model expects {}",
            d.audio_len,
            mel.n_frames(d.audio_len),
            e.mel_frames
        )));
    }
    Ok(())
}

/// Per-sample outputs of an evaluation pass.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub index: Vec<usize>,
    pub prob: Vec<f64>,
    pub label: Vec<f64>,
    pub frame_v: Vec<f64>,
    pub frame_v_target: Vec<f64>,
    pub frame_a: Vec<f64>,
    pub frame_a_target: Vec<f64>,
    pub d_v: Vec<f64>,
    pub d_a: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_a: Vec<f64>,
}

pub fn predict(model: &mut Model, data: &Dataset, prep: &Prepared, idx: &[usize]) -> Result<Predictions> {
    check_compatible(&model.cfg, data)?;
    let mut rng = substream(model.cfg.seed, "eval");
    let mut p = Predictions::default();
    for chunk in batches(idx, model.cfg.batch_size) {
        let batch = Batch::gather::<Rng>(data, prep, &chunk, None)?;
        let mut g = Graph::new();
        let out = forward(&mut g, model, &batch, false, None, &mut rng)?;
        p.index.extend(&chunk);
        p.prob.extend(g.value(out.prob).data());
        p.label.extend(&batch.labels);
        p.frame_v.extend(g.value(out.frame_v).data());
        p.frame_v_target.extend(batch.frame_v.data());
        p.frame_a.extend(g.value(out.frame_a).data());
        p.frame_a_target.extend(batch.frame_a.data());
        p.d_v.extend(&out.d_v);
        p.d_a.extend(&out.d_a);
        p.w_v.extend(g.value(out.w_v).data());
        p.w_a.extend(g.value(out.w_a).data());
    }
    Ok(p)
}

impl Predictions {
    pub fn metrics(&self) -> Metrics {
        let fv_acc = accuracy(&self.frame_v, &self.frame_v_target, 0.5);
        let fa_acc = accuracy(&self.frame_a, &self.frame_a_target, 0.5);
        let frame_auc = match (auc(&self.frame_v, &self.frame_v_target), auc(&self.frame_a, &self.frame_a_target)) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            (Some(a), None) | (None, Some(a)) => Some(a),
            (None, None) => None,
        };
        Metrics {
            acc: accuracy(&self.prob, &self.label, 0.5),
            auc: auc(&self.prob, &self.label),
            frame_acc: (fv_acc + fa_acc) / 2.0,
            frame_auc,
        }
    }
}

pub fn evaluate(model: &mut Model, data: &Dataset, prep: &Prepared) -> Result<Metrics> {
    Ok(predict(model, data, prep, &data.test)?.metrics())
}

const CKPT_MAGIC: &str = "MACB-CKPT-1";

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        write_str(w, CKPT_MAGIC)?;
        write_str(w, &self.cfg.to_kv())?;
        let mut named: Vec<(String, Tensor)> = Vec::new();
        named.extend(self.params.iter().map(|(k, v)| (format!("param:{k}"), v.clone())));
        named.extend(self.buffers.iter().map(|(k, v)| (format!("buffer:{k}"), v.clone())));
        if let Some(s) = &self.snapshot {
            named.push(("snapshot:v".into(), s.v.clone()));
            named.push(("snapshot:a".into(), s.a.clone()));
            let fake = s.fake.iter().map(|&f| f64::from(u8::from(f))).collect();
            named.push(("snapshot:fake".into(), Tensor::from_vec(fake)));
        }
        write_named(w, named.iter().map(|(k, v)| (k, v)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        if read_str(r)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let cfg = TrainConfig::from_kv(&KeyValues::parse(&read_str(r)?)?)?;
        let mut model = Model::new(cfg)?;
        let (mut sv, mut sa, mut sf) = (None, None, None);
        for (name, t) in read_named(r)? {
            let (kind, key) = name
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad entry `{name}`")))?;
            let store = match kind {
                "param" => &mut model.params,
                "buffer" => &mut model.buffers,
                "snapshot" => {
                    match key {
                        "v" => sv = Some(t),
                        "a" => sa = Some(t),
                        "fake" => sf = Some(t),
                        _ => return Err(Error::Format(format!("bad entry `{name}`"))),
                    }
                    continue;
                }
                _ => return Err(Error::Format(format!("bad entry `{name}`"))),
            };
            match store.get(key) {
                Some(old) if old.shape() == t.shape() => store.insert(key, t),
                _ => return Err(Error::Format(format!("checkpoint entry `{key}` does not fit the model"))),
            }
        }
        if let (Some(v), Some(a), Some(f)) = (sv, sa, sf) {
            let fake = f.data().iter().map(|&x| x > 0.5).collect();
            model.refit(Snapshot { v, a, fake })?;
        }
        Ok(model)
    }
}
