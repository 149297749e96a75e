//! The recurrent fusion network and the concatenation baselines.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::config::{MissingVectorMode, ModelConfig};
use crate::data::Example;
use crate::encoders::{Classifier, CxrEncoder, EhrEncoder};
use crate::error::{Error, Result};
use crate::layers::{lstm_cell_step, Linear, LstmCell};

fn series_of(batch: &[Example]) -> Result<Vec<&Tensor>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    batch
        .iter()
        .map(|e| {
            e.ehr.as_ref().ok_or_else(|| {
                Error::invalid(format!("instance {} has no time series", e.id))
            })
        })
        .collect()
}

/// Row indices of paired and image-missing examples.
fn partition(batch: &[Example]) -> (Vec<usize>, Vec<usize>) {
    (0..batch.len()).partition(|&i| batch[i].image.is_some())
}

/// Length of the fusion sequence each example produces: 2 with an image, 1 without.
pub fn sequence_lengths(batch: &[Example]) -> Vec<usize> {
    batch.iter().map(|e| 1 + usize::from(e.image.is_some())).collect()
}

/// Encoders, projection `φ: n → m`, a single fusion LSTM cell and a classifier
/// over its last hidden state. Each example is a sequence of one or two
/// tokens: `v_ehr`, then `φ(v_cxr)` when the image exists.
#[derive(Clone, Debug)]
pub struct MedFuseNet {
    pub ehr: EhrEncoder,
    pub cxr: CxrEncoder,
    pub projection: Linear,
    pub fusion: LstmCell,
    pub head: Classifier,
}

impl MedFuseNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, labels: usize, rng: &mut R) -> Self {
        let ehr = EhrEncoder::new(store, "ehr", cfg, rng);
        let cxr = CxrEncoder::new(store, "cxr", cfg, rng);
        let m = ehr.out_features();
        let projection = Linear::new(store, "proj", cxr.out_features(), m, rng);
        let fusion = LstmCell::new(store, "fusion", m, cfg.fusion_hidden, rng);
        let head = Classifier::new(store, "fusion_head", cfg.fusion_hidden, labels, rng);
        MedFuseNet {
            ehr,
            cxr,
            projection,
            fusion,
            head,
        }
    }

    /// Last fusion hidden state per example, `B×fusion_hidden`.
    pub fn fused<'g>(&self, g: &'g Graph<'_>, batch: &[Example]) -> Result<Var<'g>> {
        let v_ehr = self.ehr.encode(g, &series_of(batch)?)?;
        let cell = self.fusion.bind(g);
        let (h0, c0) = self.fusion.zero_state(g, batch.len());
        let (h1, c1) = lstm_cell_step(&cell, v_ehr, h0, c0)?;
        let (paired, missing) = partition(batch);
        if paired.is_empty() {
            return Ok(h1);
        }
        let images: Vec<&Tensor> = paired.iter().map(|&i| batch[i].image.as_ref().unwrap()).collect();
        let token = self.projection.forward(g, self.cxr.encode(g, &images)?)?;
        let (h2, _) = lstm_cell_step(&cell, token, h1.select_rows(&paired)?, c1.select_rows(&paired)?)?;
        if missing.is_empty() {
            return Var::merge_rows(batch.len(), &[(h2, &paired)]);
        }
        Var::merge_rows(batch.len(), &[(h1.select_rows(&missing)?, &missing), (h2, &paired)])
    }

    pub fn logits<'g>(&self, g: &'g Graph<'_>, batch: &[Example]) -> Result<Var<'g>> {
        self.head.logits(g, self.fused(g, batch)?)
    }
}

/// Whether the concatenation head trains on top of frozen encoders (early
/// fusion) or end to end (joint fusion).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatMode {
    Early,
    Joint,
}

/// `fc2(relu(fc1([v_ehr ‖ φ(v_cxr)])))`, with a zero or learned vector in
/// place of `v_cxr` when the image is absent.
#[derive(Clone, Debug)]
pub struct ConcatNet {
    pub ehr: EhrEncoder,
    pub cxr: CxrEncoder,
    pub projection: Linear,
    pub missing: Option<ParamId>,
    pub fc1: Linear,
    pub fc2: Classifier,
    pub mode: ConcatMode,
}

impl ConcatNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        labels: usize,
        mode: ConcatMode,
        missing_mode: MissingVectorMode,
        rng: &mut R,
    ) -> Self {
        let ehr = EhrEncoder::new(store, "ehr", cfg, rng);
        let cxr = CxrEncoder::new(store, "cxr", cfg, rng);
        let (m, n) = (ehr.out_features(), cxr.out_features());
        let projection = Linear::new(store, "proj", n, m, rng);
        let missing = (missing_mode == MissingVectorMode::Learnable)
            .then(|| store.add("missing", Tensor::zeros([n])));
        let fc1 = Linear::new(store, "fc1", 2 * m, cfg.concat_hidden, rng);
        let fc2 = Classifier::new(store, "fc2", cfg.concat_hidden, labels, rng);
        let net = ConcatNet {
            ehr,
            cxr,
            projection,
            missing,
            fc1,
            fc2,
            mode,
        };
        if mode == ConcatMode::Early {
            net.freeze_encoders(store);
        }
        net
    }

    pub fn freeze_encoders(&self, store: &mut ParamStore) {
        store.set_trainable("ehr.", false);
        store.set_trainable("cxr.", false);
    }

    /// Image features per row before projection: encoder output for paired
    /// rows, the missing vector otherwise.
    pub fn image_features<'g>(&self, g: &'g Graph<'_>, batch: &[Example]) -> Result<Var<'g>> {
        let (paired, missing) = partition(batch);
        let n = self.cxr.out_features();
        let mut parts = Vec::with_capacity(2);
        if !paired.is_empty() {
            let images: Vec<&Tensor> = paired.iter().map(|&i| batch[i].image.as_ref().unwrap()).collect();
            parts.push((self.cxr.encode(g, &images)?, paired.as_slice()));
        }
        if !missing.is_empty() {
            let fill = match self.missing {
                Some(id) => g.param(id).reshape(&[1, n])?.select_rows(&vec![0; missing.len()])?,
                None => g.constant(Tensor::zeros([missing.len(), n])),
            };
            parts.push((fill, missing.as_slice()));
        }
        Var::merge_rows(batch.len(), &parts)
    }

    pub fn logits<'g>(&self, g: &'g Graph<'_>, batch: &[Example]) -> Result<Var<'g>> {
        let v_ehr = self.ehr.encode(g, &series_of(batch)?)?;
        let token = self.projection.forward(g, self.image_features(g, batch)?)?;
        let hidden = self.fc1.forward(g, Var::concat_cols(&[v_ehr, token])?)?.relu();
        self.fc2.logits(g, hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, randomize_params, GradCheckConfig};
    use crate::config::EHR_FEATURES;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            ehr_hidden: 4,
            image_size: 8,
            cxr_widths: vec![2],
            cxr_blocks_per_stage: 1,
            cxr_features: 3,
            fusion_hidden: 5,
            concat_hidden: 4,
            ..ModelConfig::desk()
        }
    }

    fn example(id: usize, steps: usize, image: bool) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + id as u64);
        Example {
            id: format!("e{id}"),
            ehr: Some(Tensor::uniform([steps, EHR_FEATURES], 1.0, &mut rng)),
            image: image.then(|| Tensor::uniform([3, 8, 8], 1.0, &mut rng)),
            targets: vec![(id % 2) as f64, ((id + 1) % 2) as f64],
        }
    }

    fn targets(batch: &[Example]) -> Tensor {
        let data: Vec<f64> = batch.iter().flat_map(|e| e.targets.clone()).collect();
        Tensor::new([batch.len(), batch[0].targets.len()], data).unwrap()
    }

    #[test]
    fn missing_image_is_a_single_step() {
        let mut store = ParamStore::new();
        let net = MedFuseNet::new(&mut store, &cfg(), 2, &mut ChaCha8Rng::seed_from_u64(1));
        let batch = vec![example(0, 3, true), example(1, 2, false), example(2, 3, false)];
        let g = Graph::new(&store, false, 0);
        let out = net.logits(&g, &batch).unwrap().to_vec();
        for i in [1, 2] {
            let v = net.ehr.encode(&g, &[batch[i].ehr.as_ref().unwrap()]).unwrap();
            let (h, c) = net.fusion.zero_state(&g, 1);
            let (h1, _) = lstm_cell_step(&net.fusion.bind(&g), v, h, c).unwrap();
            let manual = net.head.logits(&g, h1).unwrap().to_vec();
            assert_eq!(&out[2 * i..2 * i + 2], manual.as_slice());
        }
        assert_eq!(sequence_lengths(&batch), vec![2, 1, 1]);
    }

    #[test]
    fn shapes_and_probabilities() {
        let mut store = ParamStore::new();
        let net = MedFuseNet::new(&mut store, &cfg(), 25, &mut ChaCha8Rng::seed_from_u64(2));
        let batch: Vec<_> = (0..4).map(|i| example(i, 2, i % 2 == 0)).collect();
        let g = Graph::new(&store, false, 0);
        let probs = net.logits(&g, &batch).unwrap().sigmoid();
        assert_eq!(probs.shape(), vec![4, 25]);
        assert!(probs.to_vec().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn projection_forced_to_ehr_token_gives_two_step_unroll() {
        let mut store = ParamStore::new();
        let net = MedFuseNet::new(&mut store, &cfg(), 2, &mut ChaCha8Rng::seed_from_u64(3));
        let ex = example(0, 3, true);
        let v_ehr = {
            let g = Graph::new(&store, false, 0);
            net.ehr.encode(&g, &[ex.ehr.as_ref().unwrap()]).unwrap().to_vec()
        };
        store.get_mut(net.projection.weight).data_mut().fill(0.0);
        store.get_mut(net.projection.bias).data_mut().copy_from_slice(&v_ehr);
        let g = Graph::new(&store, false, 0);
        let out = net.logits(&g, std::slice::from_ref(&ex)).unwrap().to_vec();

        let cell = net.fusion.bind(&g);
        let token = g.constant(Tensor::new([1, 4], v_ehr).unwrap());
        let (h, c) = net.fusion.zero_state(&g, 1);
        let (h, c) = lstm_cell_step(&cell, token, h, c).unwrap();
        let (h, _) = lstm_cell_step(&cell, token, h, c).unwrap();
        let manual = net.head.logits(&g, h).unwrap().to_vec();
        for (a, b) in out.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_time_series_is_rejected() {
        let mut store = ParamStore::new();
        let net = MedFuseNet::new(&mut store, &cfg(), 2, &mut ChaCha8Rng::seed_from_u64(3));
        let mut ex = example(0, 2, true);
        ex.ehr = None;
        let g = Graph::new(&store, false, 0);
        assert!(matches!(net.logits(&g, &[ex]), Err(Error::Validation(_))));
    }

    #[test]
    fn medfuse_gradients_on_mixed_batch() {
        let mut store = ParamStore::new();
        let net = MedFuseNet::new(&mut store, &cfg(), 2, &mut ChaCha8Rng::seed_from_u64(4));
        randomize_params(&mut store, 0.5, 14);
        let batch = vec![example(0, 2, true), example(1, 3, false)];
        let y = targets(&batch);
        let report = check_gradients(&mut store, GradCheckConfig::default(), |g| {
            net.logits(g, &batch)?.bce_with_logits(&y)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn early_fusion_freezes_encoders() {
        let mut store = ParamStore::new();
        let net = ConcatNet::new(&mut store, &cfg(), 2, ConcatMode::Early, MissingVectorMode::Zeros, &mut ChaCha8Rng::seed_from_u64(5));
        let batch = vec![example(0, 2, true), example(1, 2, false)];
        let y = targets(&batch);
        let g = Graph::new(&store, true, 0);
        let grads = g.backward(net.logits(&g, &batch).unwrap().bce_with_logits(&y).unwrap()).unwrap();
        for (id, _) in &grads {
            let name = store.name(*id);
            assert!(!name.starts_with("ehr.") && !name.starts_with("cxr."), "{name}");
        }
        assert!(grads.iter().any(|(id, _)| store.name(*id).starts_with("proj.")));
    }

    #[test]
    fn zero_mode_projects_zero_vector() {
        let mut store = ParamStore::new();
        let net = ConcatNet::new(&mut store, &cfg(), 2, ConcatMode::Joint, MissingVectorMode::Zeros, &mut ChaCha8Rng::seed_from_u64(6));
        let g = Graph::new(&store, false, 0);
        let feats = net.image_features(&g, &[example(0, 2, true), example(1, 2, false)]).unwrap().to_vec();
        assert_eq!(&feats[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn learnable_missing_vector_receives_gradient() {
        let mut store = ParamStore::new();
        let net = ConcatNet::new(&mut store, &cfg(), 2, ConcatMode::Joint, MissingVectorMode::Learnable, &mut ChaCha8Rng::seed_from_u64(7));
        let id = net.missing.unwrap();
        store.get_mut(id).data_mut().copy_from_slice(&[0.3, -0.2, 0.5]);
        let batch = vec![example(0, 2, true), example(1, 2, false), example(2, 2, false)];
        let y = targets(&batch);
        let g = Graph::new(&store, false, 0);
        let feats = net.image_features(&g, &batch).unwrap().to_vec();
        assert_eq!(&feats[3..6], &[0.3, -0.2, 0.5]);
        let grads = g.backward(net.logits(&g, &batch).unwrap().bce_with_logits(&y).unwrap()).unwrap();
        let g_missing = &grads.iter().find(|(p, _)| *p == id).unwrap().1;
        assert!(g_missing.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn joint_fusion_reaches_both_encoders() {
        let mut store = ParamStore::new();
        let net = ConcatNet::new(&mut store, &cfg(), 1, ConcatMode::Joint, MissingVectorMode::Zeros, &mut ChaCha8Rng::seed_from_u64(8));
        let mut batch = vec![example(0, 2, true), example(1, 2, true)];
        batch.iter_mut().for_each(|e| e.targets.truncate(1));
        let y = targets(&batch);
        let g = Graph::new(&store, false, 0);
        let logits = net.logits(&g, &batch).unwrap();
        assert_eq!(logits.shape(), vec![2, 1]);
        let grads = g.backward(logits.bce_with_logits(&y).unwrap()).unwrap();
        for prefix in ["ehr.", "cxr."] {
            assert!(grads
                .iter()
                .any(|(id, g)| store.name(*id).starts_with(prefix) && g.iter().any(|v| *v != 0.0)));
        }
    }

    #[test]
    fn early_and_joint_share_the_forward_graph() {
        let mut early_store = ParamStore::new();
        let early = ConcatNet::new(&mut early_store, &cfg(), 2, ConcatMode::Early, MissingVectorMode::Zeros, &mut ChaCha8Rng::seed_from_u64(9));
        let mut joint_store = ParamStore::new();
        let joint = ConcatNet::new(&mut joint_store, &cfg(), 2, ConcatMode::Joint, MissingVectorMode::Zeros, &mut ChaCha8Rng::seed_from_u64(10));
        joint_store.copy_matching(&early_store, "").unwrap();
        let batch = vec![example(0, 2, true), example(1, 3, false)];
        let a = early.logits(&Graph::new(&early_store, false, 0), &batch).unwrap().to_vec();
        let b = joint.logits(&Graph::new(&joint_store, false, 0), &batch).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn concat_gradients() {
        let mut store = ParamStore::new();
        let net = ConcatNet::new(&mut store, &cfg(), 2, ConcatMode::Joint, MissingVectorMode::Learnable, &mut ChaCha8Rng::seed_from_u64(12));
        randomize_params(&mut store, 0.5, 17);
        let batch = vec![example(0, 2, true), example(1, 2, false)];
        let y = targets(&batch);
        let report = check_gradients(&mut store, GradCheckConfig::default(), |g| {
            net.logits(g, &batch)?.bce_with_logits(&y)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }
}
