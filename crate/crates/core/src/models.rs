//! Network assembly: feature extractor, PI tower, no-PI head.
//!
//! A [`Network`] owns its parameters. Depending on which parts are present
//! it is a plain classifier (`phi` + `psi`), a PI network for marginalization
//! or distillation teachers (`phi` + `tower`), or a two-headed model
//! (`phi` + `tower` + `psi`).
//!
//! PI tower wiring, all dense widths equal to the tower width `w`:
//!
//! ```text
//! h   = relu(dense(a))                       w
//! j   = relu(dense([phi(x), h])) + h         w   (residual around the joint layer)
//! out = dense([j, phi(x)])                   K
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, NodeRef, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pi::PiMatrix;
use crate::relabel::Split;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, for layers followed by relu.
    HeUniform,
    /// Classifier layers start at zero so initial predictions are uniform.
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = match init {
            Init::HeUniform => {
                let bound = (6.0 / input.max(1) as f64).sqrt();
                let data = (0..input * output)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::from_vec(input, output, data).expect("dense shape")
            }
            Init::Zeros => Tensor::zeros(input, output),
        };
        let weight = store.add(format!("{name}.w"), w, true);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, output), false);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeRef) -> Result<NodeRef> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    /// Plain forward without a tape.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(store.value(self.weight))?;
        let b = store.value(self.bias);
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        Ok(out)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Feature extractor layout: input width, then hidden widths; the last
/// hidden width is the representation width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::invalid("hidden", "need at least one hidden layer"));
        }
        if input == 0 || hidden.contains(&0) {
            return Err(Error::invalid("hidden", "all widths must be >= 1"));
        }
        Ok(Self { input, hidden })
    }

    pub fn representation(&self) -> usize {
        *self.hidden.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: &MlpSpec, rng: &mut Rng) -> Self {
        let mut width = spec.input;
        let layers = spec
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let d = Dense::new(store, &format!("{name}.{i}"), width, h, Init::HeUniform, rng);
                width = h;
                d
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeRef) -> Result<NodeRef> {
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(tape, store, h)?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.apply(store, &h)?.map(|v| v.max(0.0));
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::params).collect()
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiTowerSpec {
    pub width: usize,
    pub pi_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiTower {
    pub spec: PiTowerSpec,
    pub embed: Dense,
    pub joint: Dense,
    pub out: Dense,
}

impl PiTower {
    pub fn new(
        store: &mut ParamStore,
        spec: PiTowerSpec,
        representation: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if spec.width == 0 {
            return Err(Error::invalid("pi_tower_width", "must be >= 1"));
        }
        let w = spec.width;
        Ok(Self {
            spec,
            embed: Dense::new(store, "pi.embed", spec.pi_width, w, Init::HeUniform, rng),
            joint: Dense::new(store, "pi.joint", representation + w, w, Init::HeUniform, rng),
            out: Dense::new(store, "pi.out", w + representation, classes, Init::Zeros, rng),
        })
    }

    /// PI-head logits `π(φ(x), a)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        phi: NodeRef,
        a: NodeRef,
    ) -> Result<NodeRef> {
        let (_, pw) = tape.shape(a);
        if pw != self.spec.pi_width {
            return Err(Error::Shape {
                op: "pi_tower_forward",
                lhs: tape.shape(a),
                rhs: (tape.shape(a).0, self.spec.pi_width),
            });
        }
        let e = self.embed.forward(tape, store, a)?;
        let h = tape.relu(e)?;
        let cat = tape.concat_cols(phi, h)?;
        let jz = self.joint.forward(tape, store, cat)?;
        let j = tape.relu(jz)?;
        let res = tape.add(j, h)?;
        let z = tape.concat_cols(res, phi)?;
        self.out.forward(tape, store, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.embed, &self.joint, &self.out]
            .into_iter()
            .flat_map(Dense::params)
            .collect()
    }

    /// `Σ_j weight_j · softmax(π(φ_i, a_j))` for every representation row `φ_i`,
    /// sharing the per-row and per-PI partial products across all pairs.
    pub fn mixture_probs(
        &self,
        store: &ParamStore,
        phi: &Tensor,
        bank: &Tensor,
        weights: &[f64],
    ) -> Result<Tensor> {
        let r = phi.cols();
        let w = self.spec.width;
        let k = self.out.output;
        let joint_w = store.value(self.joint.weight);
        let out_w = store.value(self.out.weight);
        // joint dense split into its φ rows and PI-embedding rows
        let joint_phi = Tensor::from_vec(r, w, joint_w.data()[..r * w].to_vec())?;
        let joint_h = Tensor::from_vec(w, w, joint_w.data()[r * w..].to_vec())?;
        let out_j = Tensor::from_vec(w, k, out_w.data()[..w * k].to_vec())?;
        let out_phi = Tensor::from_vec(r, k, out_w.data()[w * k..].to_vec())?;

        let h = self.embed.apply(store, bank)?.map(|v| v.max(0.0));
        let mut hb = h.matmul(&joint_h)?;
        let jb = store.value(self.joint.bias);
        for row in 0..hb.rows() {
            for (v, b) in hb.row_mut(row).iter_mut().zip(jb.data()) {
                *v += b;
            }
        }
        let a_part = phi.matmul(&joint_phi)?;
        let mut c_part = phi.matmul(&out_phi)?;
        let ob = store.value(self.out.bias);
        for row in 0..c_part.rows() {
            for (v, b) in c_part.row_mut(row).iter_mut().zip(ob.data()) {
                *v += b;
            }
        }

        let mut probs = Tensor::zeros(phi.rows(), k);
        let mut res = vec![0.0; w];
        let mut logits = vec![0.0; k];
        for i in 0..phi.rows() {
            let ai = a_part.row(i);
            let ci = c_part.row(i);
            let pi = probs.row_mut(i);
            for (j, &wt) in weights.iter().enumerate() {
                let hj = h.row(j);
                let bj = hb.row(j);
                for t in 0..w {
                    res[t] = (ai[t] + bj[t]).max(0.0) + hj[t];
                }
                logits.copy_from_slice(ci);
                for (t, &rv) in res.iter().enumerate() {
                    if rv == 0.0 {
                        continue;
                    }
                    let orow = out_j.row(t);
                    for (l, o) in logits.iter_mut().zip(orow) {
                        *l += rv * o;
                    }
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                for (p, l) in pi.iter_mut().zip(&logits) {
                    *p += wt * l / z;
                }
            }
        }
        Ok(probs)
    }
}

/// Parameter counts per pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub feature_extractor: usize,
    pub pi_pathway: usize,
    pub no_pi_head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.feature_extractor + self.pi_pathway + self.no_pi_head
    }
}

/// Per-example residual parameters `u, v` (N×K), train split only.
#[derive(Clone, Debug, PartialEq)]
pub struct SopParams {
    pub u: ParamId,
    pub v: ParamId,
    pub examples: usize,
    pub classes: usize,
}

impl SopParams {
    /// `u = v = init` everywhere: a zero residual with non-vanishing gradients.
    pub fn new(store: &mut ParamStore, examples: usize, classes: usize, init: f64) -> Self {
        let u = store.add("sop.u", Tensor::filled(examples, classes, init), false);
        let v = store.add("sop.v", Tensor::filled(examples, classes, init), false);
        Self {
            u,
            v,
            examples,
            classes,
        }
    }

    /// `u_i² − v_i²` for every training example.
    pub fn residuals(&self, store: &ParamStore) -> Tensor {
        store
            .value(self.u)
            .zip_map(store.value(self.v), |a, b| a * a - b * b)
    }
}

/// `f(x) + u_i ⊙ u_i − v_i ⊙ v_i` for the training rows `rows`.
pub fn sop_logits(
    tape: &mut Tape,
    store: &ParamStore,
    sop: &SopParams,
    logits: NodeRef,
    rows: &[usize],
    split: Split,
) -> Result<NodeRef> {
    if split != Split::Train {
        return Err(Error::invalid("split", "SOP residuals exist only for training examples"));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= sop.examples) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: sop.examples,
        });
    }
    let u = tape.param_rows(store, sop.u, rows);
    let v = tape.param_rows(store, sop.v, rows);
    sop_combine(tape, logits, u, v)
}

/// `f + u⊙u − v⊙v` on tape nodes.
pub fn sop_combine(tape: &mut Tape, f: NodeRef, u: NodeRef, v: NodeRef) -> Result<NodeRef> {
    let uu = tape.mul(u, u)?;
    let vv = tape.mul(v, v)?;
    let neg = tape.scale(vv, -1.0)?;
    let r = tape.add(uu, neg)?;
    tape.add(f, r)
}

/// Soft targets `softmax(teacher_logits / tau)`, plain constants.
pub fn distill_targets(teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
    }
    Ok(teacher_logits.map(|v| v / tau).softmax_rows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub mlp: MlpSpec,
    pub classes: usize,
    /// PI tower, if the network consumes PI.
    pub tower: Option<PiTowerSpec>,
    /// Whether a no-PI head `psi` sits on the representation.
    pub no_pi_head: bool,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub phi: Mlp,
    pub tower: Option<PiTower>,
    pub psi: Option<Dense>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::invalid("classes", "need at least 2 classes"));
        }
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, "init", 0);
        let phi = Mlp::new(&mut store, "phi", &spec.mlp, &mut init);
        let r = spec.mlp.representation();
        let tower = spec
            .tower
            .map(|t| PiTower::new(&mut store, t, r, spec.classes, &mut init))
            .transpose()?;
        let psi = spec
            .no_pi_head
            .then(|| Dense::new(&mut store, "psi", r, spec.classes, Init::Zeros, &mut init));
        Ok(Self {
            spec,
            store,
            phi,
            tower,
            psi,
        })
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    fn psi(&self) -> Result<&Dense> {
        self.psi
            .as_ref()
            .ok_or_else(|| Error::invalid("network", "no no-PI head"))
    }

    fn tower(&self) -> Result<&PiTower> {
        self.tower.as_ref().ok_or(Error::MissingPi)
    }

    pub fn features(&self, tape: &mut Tape, x: NodeRef) -> Result<NodeRef> {
        self.phi.forward(tape, &self.store, x)
    }

    pub fn no_pi_logits(&self, tape: &mut Tape, phi: NodeRef) -> Result<NodeRef> {
        self.psi()?.forward(tape, &self.store, phi)
    }

    pub fn pi_logits(&self, tape: &mut Tape, phi: NodeRef, a: NodeRef) -> Result<NodeRef> {
        self.tower()?.forward(tape, &self.store, phi, a)
    }

    /// No-PI head logits on a batch.
    pub fn predict_no_pi(&self, x: &Tensor) -> Result<Tensor> {
        let phi = self.phi.apply(&self.store, x)?;
        self.psi()?.apply(&self.store, &phi)
    }

    /// PI head logits on a batch with its PI rows.
    pub fn predict_pi(&self, x: &Tensor, a: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let an = tape.leaf(a.clone());
        let phi = self.features(&mut tape, xn)?;
        let out = self.pi_logits(&mut tape, phi, an)?;
        Ok(tape.value(out).clone())
    }

    pub fn representation(&self, x: &Tensor) -> Result<Tensor> {
        self.phi.apply(&self.store, x)
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            feature_extractor: self.store.count(self.phi.params()),
            pi_pathway: self.tower.as_ref().map_or(0, |t| self.store.count(t.params())),
            no_pi_head: self.psi.as_ref().map_or(0, |p| self.store.count(p.params())),
        }
    }

    pub fn phi_params(&self) -> Vec<ParamId> {
        self.phi.params()
    }

    pub fn psi_params(&self) -> Vec<ParamId> {
        self.psi.as_ref().map_or_else(Vec::new, |p| p.params().to_vec())
    }

    pub fn tower_params(&self) -> Vec<ParamId> {
        self.tower.as_ref().map_or_else(Vec::new, PiTower::params)
    }

    /// Parameter values by name.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// `(logits_pi, logits_nopi)` of the two-headed model; the no-PI head sees
/// the representation only through a stop-gradient.
pub fn tram_forward(
    net: &Network,
    tape: &mut Tape,
    x: &Tensor,
    a: Option<&Tensor>,
) -> Result<(NodeRef, NodeRef)> {
    let a = a.ok_or(Error::MissingPi)?;
    let xn = tape.leaf(x.clone());
    let an = tape.leaf(a.clone());
    let phi = net.features(tape, xn)?;
    let pi = net.pi_logits(tape, phi, an)?;
    let blocked = tape.stop_gradient(phi);
    let nopi = net.no_pi_logits(tape, blocked)?;
    Ok((pi, nopi))
}

/// `CE(logits_pi, t) + λ·CE(logits_nopi, t)`.
pub fn tram_loss(
    net: &Network,
    tape: &mut Tape,
    x: &Tensor,
    a: Option<&Tensor>,
    targets: &Tensor,
    lambda: f64,
) -> Result<NodeRef> {
    let (pi, nopi) = tram_forward(net, tape, x, a)?;
    let l_pi = cross_entropy(tape, pi, targets)?;
    let l_nopi = cross_entropy(tape, nopi, targets)?;
    let weighted = tape.scale(l_nopi, lambda)?;
    tape.add(l_pi, weighted)
}

/// Default number of PI samples for marginalization.
pub const DEFAULT_MC_SAMPLES: usize = 1000;

/// Distinct bank rows with their weights (relative frequencies).
fn weighted_rows(bank: &Tensor, picks: &[usize]) -> (Tensor, Vec<f64>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows: Vec<usize> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for &p in picks {
        let key: Vec<u64> = bank.row(p).iter().map(|v| v.to_bits()).collect();
        match index.get(&key) {
            Some(&slot) => counts[slot] += 1.0,
            None => {
                index.insert(key, rows.len());
                rows.push(p);
                counts.push(1.0);
            }
        }
    }
    let total = picks.len() as f64;
    (
        bank.select_rows(&rows),
        counts.into_iter().map(|c| c / total).collect(),
    )
}

/// Marginal predictive distribution `mean_j softmax(π(φ(x), a_j))` with
/// `a_j` drawn uniformly (with replacement) from `bank`. When `samples` is at
/// least the bank size the bank is enumerated once instead. One set of draws
/// is shared by all rows of `x`.
pub fn afm_predict(
    net: &Network,
    x: &Tensor,
    bank: &PiMatrix,
    samples: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if bank.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    let picks: Vec<usize> = if samples >= bank.rows() {
        (0..bank.rows()).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..bank.rows())).collect()
    };
    afm_predict_with(net, x, bank, &picks)
}

/// Marginal over an explicit list of bank row indices.
pub fn afm_predict_with(
    net: &Network,
    x: &Tensor,
    bank: &PiMatrix,
    picks: &[usize],
) -> Result<Tensor> {
    if bank.rows() == 0 || picks.is_empty() {
        return Err(Error::EmptyBank);
    }
    let tower = net.tower()?;
    let (rows, weights) = weighted_rows(&bank.values, picks);
    let phi = net.representation(x)?;
    tower.mixture_probs(&net.store, &phi, &rows, &weights)
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: Vec<CheckpointEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "pilab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every parameter as `{name, rows, cols, data}` in a versioned JSON document.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads values by name into an already-built store of the same layout.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::invalid(
            "checkpoint",
            format!("unsupported format {} v{}", ck.format, ck.version),
        ));
    }
    for e in ck.params {
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("unknown parameter {}", e.name)))?;
        let value = Tensor::from_vec(e.rows, e.cols, e.data)?;
        if value.shape() != store.value(id).shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: store.value(id).shape(),
                rhs: value.shape(),
            });
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::one_hot;
    use crate::pi::PiKind;

    fn tram_net(width: usize, pi_width: usize) -> Network {
        Network::new(
            NetworkSpec {
                mlp: MlpSpec::new(5, vec![8, 6]).unwrap(),
                classes: 3,
                tower: Some(PiTowerSpec { width, pi_width }),
                no_pi_head: true,
            },
            7,
        )
        .unwrap()
    }

    fn randomize(net: &mut Network, seed: u64) {
        let mut r = rng::from_seed(seed);
        for id in net.store.ids().collect::<Vec<_>>() {
            for v in net.store.value_mut(id).data_mut() {
                *v = r.random_range(-0.8..0.8);
            }
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::from_seed(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(4, vec![]).is_err());
        assert!(MlpSpec::new(4, vec![3, 0]).is_err());
    }

    #[test]
    fn pi_tower_output_width_and_zero_pi() {
        let mut net = tram_net(4, 2);
        randomize(&mut net, 1);
        let x = batch(3, 5, 2);
        let out = net.predict_pi(&x, &Tensor::zeros(3, 2)).unwrap();
        assert_eq!(out.shape(), (3, 3));
        assert!(out.max_abs() > 0.0);
    }

    #[test]
    fn pi_tower_rejects_wrong_pi_width() {
        let net = tram_net(4, 2);
        assert!(net.predict_pi(&batch(3, 5, 2), &Tensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn wider_tower_has_more_pi_parameters() {
        let small = tram_net(4, 2).param_counts();
        let big = tram_net(8, 2).param_counts();
        assert!(big.pi_pathway > small.pi_pathway);
        assert_eq!(big.feature_extractor, small.feature_extractor);
    }

    #[test]
    fn counts_split_into_pathways() {
        let net = Network::new(
            NetworkSpec {
                mlp: MlpSpec::new(5, vec![8, 6]).unwrap(),
                classes: 3,
                tower: Some(PiTowerSpec { width: 4, pi_width: 2 }),
                no_pi_head: false,
            },
            1,
        )
        .unwrap();
        let c = net.param_counts();
        let all: usize = net.store.count(net.store.ids());
        assert_eq!(c.feature_extractor + c.pi_pathway, all);
        // 5*8+8 + 8*6+6 ; 2*4+4 + 10*4+4 + 10*3+3
        assert_eq!(c.feature_extractor, 102);
        assert_eq!(c.pi_pathway, 89);
    }

    #[test]
    fn tram_feature_gradients_ignore_no_pi_branch() {
        let mut net = tram_net(4, 2);
        randomize(&mut net, 3);
        let x = batch(6, 5, 4);
        let a = batch(6, 2, 5);
        let y = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let grads_for = |lambda: f64| {
            let mut tape = Tape::new();
            let loss = tram_loss(&net, &mut tape, &x, Some(&a), &y, lambda).unwrap();
            let g = tape.backward(loss).unwrap();
            (
                net.phi_params()
                    .into_iter()
                    .map(|id| tape.param_grad(&g, &net.store, id))
                    .collect::<Vec<_>>(),
                net.psi_params()
                    .into_iter()
                    .map(|id| tape.param_grad(&g, &net.store, id))
                    .collect::<Vec<_>>(),
            )
        };
        let (phi0, psi0) = grads_for(0.0);
        let (phi1, psi1) = grads_for(1.0);
        assert_eq!(phi0, phi1);
        assert!(psi0.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(psi1.iter().any(|t| t.max_abs() > 0.0));
    }

    #[test]
    fn tram_requires_pi() {
        let net = tram_net(4, 2);
        let mut tape = Tape::new();
        assert!(matches!(
            tram_forward(&net, &mut tape, &batch(2, 5, 1), None),
            Err(Error::MissingPi)
        ));
    }

    #[test]
    fn no_pi_prediction_ignores_pi() {
        let mut net = tram_net(4, 2);
        randomize(&mut net, 8);
        let x = batch(4, 5, 9);
        let mut t1 = Tape::new();
        let (_, n1) = tram_forward(&net, &mut t1, &x, Some(&batch(4, 2, 10))).unwrap();
        let mut t2 = Tape::new();
        let (_, n2) = tram_forward(&net, &mut t2, &x, Some(&batch(4, 2, 11))).unwrap();
        assert_eq!(t1.value(n1), t2.value(n2));
        assert_eq!(t1.value(n1), &net.predict_no_pi(&x).unwrap());
    }

    fn bank(rows: usize, seed: u64) -> PiMatrix {
        PiMatrix::new(PiKind::RandomId, batch(rows, 2, seed))
    }

    #[test]
    fn afm_single_row_bank_is_conditional_prediction() {
        let mut net = tram_net(4, 2);
        randomize(&mut net, 12);
        let x = batch(5, 5, 13);
        let b = bank(1, 14);
        let mut r = rng::from_seed(0);
        let marg = afm_predict(&net, &x, &b, DEFAULT_MC_SAMPLES, &mut r).unwrap();
        let a = Tensor::from_vec(5, 2, b.values.row(0).repeat(5)).unwrap();
        let cond = net.predict_pi(&x, &a).unwrap().softmax_rows();
        for (p, q) in marg.data().iter().zip(cond.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn afm_exhaustive_matches_brute_force_and_is_order_invariant() {
        let mut net = tram_net(4, 2);
        randomize(&mut net, 15);
        let x = batch(4, 5, 16);
        let b = bank(9, 17);
        let mut r = rng::from_seed(0);
        let marg = afm_predict(&net, &x, &b, 9, &mut r).unwrap();
        let mut brute = Tensor::zeros(4, 3);
        for j in 0..9 {
            let a = Tensor::from_vec(4, 2, b.values.row(j).repeat(4)).unwrap();
            brute.add_assign(&net.predict_pi(&x, &a).unwrap().softmax_rows().map(|v| v / 9.0));
        }
        for (p, q) in marg.data().iter().zip(brute.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let rev: Vec<usize> = (0..9).rev().collect();
        let shuffled = b.select_rows(&rev);
        let marg2 = afm_predict(&net, &x, &shuffled, 9, &mut r).unwrap();
        for (p, q) in marg.data().iter().zip(marg2.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn afm_empty_bank_errors() {
        let net = tram_net(4, 2);
        let empty = PiMatrix::new(PiKind::RandomId, Tensor::zeros(0, 2));
        let mut r = rng::from_seed(0);
        assert!(matches!(
            afm_predict(&net, &batch(1, 5, 0), &empty, 10, &mut r),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn sop_equal_parameters_cancel() {
        let mut store = ParamStore::new();
        let sop = SopParams::new(&mut store, 4, 3, 0.37);
        let mut tape = Tape::new();
        let f = tape.leaf(batch(2, 3, 1));
        let out = sop_logits(&mut tape, &store, &sop, f, &[1, 3], Split::Train).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
        assert!(sop_logits(&mut tape, &store, &sop, f, &[1, 3], Split::Test).is_err());
    }

    #[test]
    fn sop_residual_reaches_any_vector() {
        // r = u² − v² with u = sqrt(max(r,0)), v = sqrt(max(−r,0))
        let target = [1.5, -0.25, 0.0];
        let u: Vec<f64> = target.iter().map(|&r: &f64| r.max(0.0).sqrt()).collect();
        let v: Vec<f64> = target.iter().map(|&r: &f64| (-r).max(0.0).sqrt()).collect();
        for ((r, a), b) in target.iter().zip(&u).zip(&v) {
            assert!((a * a - b * b - r).abs() < 1e-15);
        }
    }

    #[test]
    fn distill_targets_behaviour() {
        let z = Tensor::from_vec(2, 3, vec![2.0, 0.5, -1.0, 0.0, 3.0, 1.0]).unwrap();
        assert_eq!(distill_targets(&z, 1.0).unwrap(), z.softmax_rows());
        let hot = distill_targets(&z, 1e6).unwrap();
        assert!(hot.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
        for tau in [0.5, 2.0, 10.0] {
            assert_eq!(distill_targets(&z, tau).unwrap().argmax_rows(), z.argmax_rows());
        }
        assert!(distill_targets(&z, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = tram_net(4, 2);
        randomize(&mut net, 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&net.store, &path).unwrap();
        let mut fresh = tram_net(4, 2);
        load_checkpoint(&mut fresh.store, &path).unwrap();
        assert_eq!(fresh.snapshot(), net.snapshot());
        let mut other = tram_net(5, 2);
        assert!(load_checkpoint(&mut other.store, &path).is_err());
    }
}
