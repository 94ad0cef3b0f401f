use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LossMode, TwoStreamConfig};
use super::model::{Model, PreparedScene};
use super::params::{AdamState, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, StageValues};
use crate::tensor::{Graph, Tensor, Var};

/// Parameters, optimizer moments, step counter and sampling RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TwoStreamConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = Model::build(config, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Self { model, params, adam, step: 0, rng })
    }

    pub fn config(&self) -> &TwoStreamConfig {
        &self.model.config
    }
}

fn stage_mean(values: &[StageValues]) -> StageValues {
    let n = values.len().max(1) as f64;
    let mut out = StageValues::default();
    for v in values {
        out.total += v.total / n;
        out.cls += v.cls / n;
        out.reg_bin += v.reg_bin / n;
        out.reg_res += v.reg_res / n;
        out.ce += v.ce / n;
    }
    out
}

fn batch_mean(g: &mut Graph, totals: &[Var]) -> Result<Var> {
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.affine(acc, 1.0 / totals.len() as f64, 0.0))
}

/// Loss of `batch` under the current parameters, without an update.
pub fn evaluate_loss(state: &TrainState, batch: &[&PreparedScene], mode: LossMode, seed: u64) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, false);
    let mut rpn = Vec::new();
    let mut rcnn = Vec::new();
    let mut total = 0.0;
    for scene in batch {
        let l = state.model.scene_loss(&mut g, &p, scene, mode, seed)?;
        rpn.push(StageValues::read(&g, &l.rpn, l.rpn_total));
        rcnn.push(StageValues::read(&g, &l.rcnn, l.rcnn_total));
        total += g.value(l.total).item() / batch.len() as f64;
    }
    Ok(LossBreakdown { total, rpn: stage_mean(&rpn), rcnn: stage_mean(&rcnn) })
}

/// One adaptive-moment update on the mean loss of `batch`. A non-finite loss
/// or gradient leaves the state untouched.
pub fn train_step(state: &mut TrainState, batch: &[&PreparedScene], mode: LossMode) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Input("train_step needs at least one scene".into()));
    }
    let seed = state.rng.random::<u64>();
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let mut totals = Vec::with_capacity(batch.len());
    let mut rpn = Vec::new();
    let mut rcnn = Vec::new();
    for scene in batch {
        let l = state.model.scene_loss(&mut g, &p, scene, mode, seed)?;
        rpn.push(StageValues::read(&g, &l.rpn, l.rpn_total));
        rcnn.push(StageValues::read(&g, &l.rcnn, l.rcnn_total));
        totals.push(l.total);
    }
    let loss = batch_mean(&mut g, &totals)?;
    let breakdown = LossBreakdown {
        total: g.value(loss).item(),
        rpn: stage_mean(&rpn),
        rcnn: stage_mean(&rcnn),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("step {}: loss is not finite: {breakdown:?}", state.step)));
    }
    g.backward(loss)?;
    let grads = state.params.gradients(&g, &p);
    if let Some(k) = grads.iter().position(|gr| gr.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "step {}: gradient of `{}` is not finite (loss {breakdown:?})",
            state.step,
            state.params.names()[k]
        )));
    }
    let adam_cfg = state.model.config.adam;
    state.adam.step(&mut state.params, &grads, &adam_cfg)?;
    state.step += 1;
    Ok(breakdown)
}

/// Gradient norm of every parameter block for one batch, without an update.
pub fn gradient_norms(state: &TrainState, batch: &[&PreparedScene], mode: LossMode) -> Result<Vec<(String, f64)>> {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let mut totals = Vec::new();
    for scene in batch {
        totals.push(state.model.scene_loss(&mut g, &p, scene, mode, 0)?.total);
    }
    let loss = batch_mean(&mut g, &totals)?;
    g.backward(loss)?;
    let grads = state.params.gradients(&g, &p);
    Ok(state
        .params
        .names()
        .iter()
        .zip(grads)
        .map(|(n, gr)| (n.clone(), gr.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect())
}

/// `steps` updates on batches drawn with replacement by the state's RNG.
pub fn train(state: &mut TrainState, scenes: &[PreparedScene], steps: usize, mode: LossMode) -> Result<Vec<LossBreakdown>> {
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let bs = state.model.config.batch_size;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&PreparedScene> = (0..bs).map(|_| &scenes[state.rng.random_range(0..scenes.len())]).collect();
        trace.push(train_step(state, &batch, mode)?);
    }
    Ok(trace)
}

const MAGIC: &[u8; 8] = b"LIFUSCKP";
const VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend((b.len() as u64).to_le_bytes());
    out.extend(b);
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Parse(format!("checkpoint truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse("checkpoint block too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl TrainState {
    /// Self-describing binary: magic, version, JSON config, step, RNG
    /// position, then one named block per parameter (shape, values, both
    /// moments) as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.model.config).expect("config serializes").as_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.adam.t.to_le_bytes());
        out.extend(self.rng.get_seed());
        out.extend(self.rng.get_stream().to_le_bytes());
        out.extend(self.rng.get_word_pos().to_le_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for (k, (name, t)) in self.params.names().iter().zip(self.params.tensors()).enumerate() {
            put_bytes(&mut out, name.as_bytes());
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
            put_f64s(&mut out, &self.adam.m[k]);
            put_f64s(&mut out, &self.adam.v[k]);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let config: TwoStreamConfig = serde_json::from_slice(r.bytes()?)?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut state = TrainState::new(&config)?;
        let n = r.u32()? as usize;
        if n != state.params.len() {
            return Err(Error::Parse(format!("checkpoint has {n} parameter blocks, model has {}", state.params.len())));
        }
        for k in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Parse("block name is not UTF-8".into()))?;
            if name != state.params.names()[k] {
                return Err(Error::Parse(format!("block {k} is `{name}`, expected `{}`", state.params.names()[k])));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let expect = state.params.tensors()[k].shape().to_vec();
            if shape != expect {
                return Err(Error::Parse(format!("block `{name}` has shape {shape:?}, expected {expect:?}")));
            }
            let numel = shape.iter().product();
            state.params.tensors_mut()[k] = Tensor::new(shape, r.f64s(numel)?)?;
            state.adam.m[k] = r.f64s(numel)?;
            state.adam.v[k] = r.f64s(numel)?;
        }
        if r.at != buf.len() {
            return Err(Error::Parse(format!("{} trailing bytes after checkpoint", buf.len() - r.at)));
        }
        state.step = step;
        state.adam.t = adam_t;
        state.rng = ChaCha8Rng::from_seed(seed);
        state.rng.set_stream(stream);
        state.rng.set_word_pos(word_pos);
        Ok(state)
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::super::config::FusionMode;
    use super::super::fixtures::{prepared, small_config};
    use super::*;

    fn totals(trace: &[LossBreakdown]) -> Vec<f64> {
        trace.iter().map(|l| l.total).collect()
    }

    #[test]
    fn equal_seeds_give_equal_traces() {
        let cfg = small_config(FusionMode::Gated);
        let scenes = vec![prepared(&cfg, 1), prepared(&cfg, 2)];
        let run = || {
            let mut st = TrainState::new(&cfg).unwrap();
            totals(&train(&mut st, &scenes, 6, LossMode::Ce).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lambda_makes_ce_and_none_identical() {
        let mut cfg = small_config(FusionMode::Gated);
        cfg.loss.lambda = 0.0;
        let scenes = vec![prepared(&cfg, 3)];
        let run = |mode| {
            let mut st = TrainState::new(&cfg).unwrap();
            let t = totals(&train(&mut st, &scenes, 5, mode).unwrap());
            (t, st.params)
        };
        assert_eq!(run(LossMode::Ce), run(LossMode::None));
    }

    #[test]
    fn every_parameter_block_receives_gradient() {
        let cfg = small_config(FusionMode::Gated);
        let mut st = TrainState::new(&cfg).unwrap();
        let scenes = vec![prepared(&cfg, 6)];
        assert!(scenes[0].foreground_count() > 0, "scene without target points");
        train(&mut st, &scenes, 1, LossMode::Ce).unwrap();
        let batch: Vec<&PreparedScene> = scenes.iter().collect();
        for (name, norm) in gradient_norms(&st, &batch, LossMode::Ce).unwrap() {
            assert!(norm > 0.0 && norm.is_finite(), "{name}: {norm}");
        }
    }

    #[test]
    fn loss_decreases_on_one_scene() {
        let cfg = small_config(FusionMode::Gated);
        let scenes = vec![prepared(&cfg, 5)];
        for mode in [LossMode::Ce, LossMode::IouOnly, LossMode::None] {
            let mut st = TrainState::new(&cfg).unwrap();
            let t = totals(&train(&mut st, &scenes, 50, mode).unwrap());
            let head: f64 = t[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = t[45..].iter().sum::<f64>() / 5.0;
            assert!(tail < head, "{mode:?}: {head} -> {tail}");
        }
    }

    #[test]
    fn resumed_training_is_bitwise_identical() {
        let cfg = small_config(FusionMode::Gated);
        let scenes = vec![prepared(&cfg, 6), prepared(&cfg, 7)];
        let mut a = TrainState::new(&cfg).unwrap();
        train(&mut a, &scenes, 3, LossMode::Ce).unwrap();
        let mut buf = Vec::new();
        a.save(&mut buf).unwrap();
        let mut b = TrainState::load(&buf[..]).unwrap();
        assert_eq!(a, b);
        let ta = totals(&train(&mut a, &scenes, 3, LossMode::Ce).unwrap());
        let tb = totals(&train(&mut b, &scenes, 3, LossMode::Ce).unwrap());
        assert_eq!(ta, tb);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let cfg = small_config(FusionMode::None);
        let bytes = TrainState::new(&cfg).unwrap().to_bytes();
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TrainState::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(TrainState::from_bytes(&magic).is_err());
        let other = TrainState::new(&small_config(FusionMode::Gated)).unwrap();
        let mut swapped = other.to_bytes();
        // Config says gated but the blocks belong to the point-only model.
        let head = 12 + 8 + serde_json::to_vec(other.config()).unwrap().len();
        swapped.truncate(head);
        swapped.extend(&bytes[12 + 8 + serde_json::to_vec(&cfg).unwrap().len()..]);
        assert!(TrainState::from_bytes(&swapped).is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let cfg = small_config(FusionMode::None);
        let mut st = TrainState::new(&cfg).unwrap();
        assert!(train_step(&mut st, &[], LossMode::Ce).is_err());
        assert!(train(&mut st, &[], 1, LossMode::Ce).is_err());
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(AdamState::clip(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut h = vec![vec![0.3]];
        AdamState::clip(&mut h, 1.0);
        assert_eq!(h, vec![vec![0.3]]);
    }
}
