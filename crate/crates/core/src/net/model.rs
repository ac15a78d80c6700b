use super::layers::{
    avg_pool2, avg_pool2_backward, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, ConvSpec, Tensor,
};
use super::params::ParamStore;
use super::{GaussianField, ModelConfig, ModelMode};
use crate::deform::{scaling_and_squaring, SsConfig};
use crate::error::{Error, Result};
use crate::losses::GaussianGrad;
use crate::real::Real;
use crate::volume::{warp_scalar, FieldKind, ScalarVolume, Shape3, VectorField};

#[derive(Debug, Clone, Copy)]
struct DecoderSpec {
    conv1: ConvSpec,
    conv2: ConvSpec,
    head: ConvSpec,
}

#[derive(Debug, Clone)]
enum Arch {
    Pretrain {
        decoders: Vec<DecoderSpec>,
        ensemble_head: ConvSpec,
    },
    /// `up[k]` fuses level `k + 1` into level `k` (0-based encoder levels).
    Backbone {
        up: Vec<ConvSpec>,
        full: ConvSpec,
        head: ConvSpec,
    },
}

#[derive(Debug, Clone)]
struct EncoderRecord<T> {
    input: Tensor<T>,
    pre: Vec<Tensor<T>>,
    feats: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
struct DecoderRecord<T> {
    z1: Tensor<T>,
    a1: Tensor<T>,
    z2: Tensor<T>,
    h: Tensor<T>,
}

#[derive(Debug, Clone)]
enum Record<T> {
    Pretrain {
        enc: EncoderRecord<T>,
        dec: Vec<DecoderRecord<T>>,
        ensemble_in: Tensor<T>,
    },
    Backbone {
        enc: EncoderRecord<T>,
        /// Indexed like `Arch::Backbone::up`.
        cats: Vec<Tensor<T>>,
        pres: Vec<Tensor<T>>,
        full_cat: Tensor<T>,
        full_pre: Tensor<T>,
        full_act: Tensor<T>,
    },
}

/// Everything the pretraining objective consumes.
#[derive(Debug, Clone)]
pub struct PretrainOutput<T: Real> {
    /// Per-stage distributions at stage resolution, means in full-resolution voxels.
    pub stages: Vec<GaussianField<T>>,
    /// The same, upsampled to the input grid.
    pub stages_full: Vec<GaussianField<T>>,
    pub ensemble: GaussianField<T>,
    pub phi: VectorField<T>,
    pub warped: ScalarVolume<T>,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput<T: Real> {
    pub velocity: VectorField<T>,
    pub phi: VectorField<T>,
    pub warped: ScalarVolume<T>,
}

/// Encoder plus either pretraining decoders or the backbone decoder, with all
/// weights in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct RegistrationModel<T: Real = f32> {
    config: ModelConfig,
    seed: u64,
    params: ParamStore<T>,
    encoder: Vec<ConvSpec>,
    arch: Arch,
    record: Option<Record<T>>,
}

impl<T: Real> RegistrationModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::layout(config, seed)?;
        m.params.initialize(seed);
        Ok(m)
    }

    /// Builds the parameter table with all values zero.
    pub(crate) fn layout(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.stages;
        let d = config.decoder_channels;
        let mut params = ParamStore::new();
        let mut encoder = Vec::with_capacity(k);
        let mut cin = 2;
        for s in 0..k {
            let c = config.stage_channels(s);
            encoder.push(params.conv(&format!("encoder.{s}"), cin, c));
            cin = c;
        }
        let arch = match config.mode {
            ModelMode::Pretrain => {
                let decoders = (0..k)
                    .map(|s| DecoderSpec {
                        conv1: params.conv(&format!("decoder.{s}.conv1"), config.stage_channels(s), d),
                        conv2: params.conv(&format!("decoder.{s}.conv2"), d, d),
                        head: params.conv(&format!("decoder.{s}.head"), d, 6),
                    })
                    .collect();
                let ensemble_head = params.conv("ensemble.head", d, 6);
                Arch::Pretrain { decoders, ensemble_head }
            }
            ModelMode::Backbone => {
                let up = (0..k - 1)
                    .map(|s| {
                        let c = config.stage_channels(s);
                        params.conv(&format!("unet.up{s}"), config.stage_channels(s + 1) + c, c)
                    })
                    .collect();
                let c0 = config.stage_channels(0);
                let full = params.conv("unet.full", c0 + 2, c0);
                let head = params.conv("unet.head", c0, 3);
                Arch::Backbone { up, full, head }
            }
        };
        Ok(RegistrationModel { config, seed, params, encoder, arch, record: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable parameter access; drops any recorded forward pass.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.record = None;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Names of the encoder parameter entries.
    pub fn encoder_entry_names(&self) -> Vec<String> {
        self.params.entries().iter().filter(|e| e.name.starts_with("encoder.")).map(|e| e.name.clone()).collect()
    }

    /// Parameter count of lightweight decoder `stage` (pretrain mode only).
    pub fn decoder_param_count(&self, stage: usize) -> Option<usize> {
        let prefix = format!("decoder.{stage}.");
        self.prefixed_count(&prefix)
    }

    /// Parameter count of backbone fusion stage `level` (backbone mode only).
    pub fn backbone_stage_param_count(&self, level: usize) -> Option<usize> {
        self.prefixed_count(&format!("unet.up{level}."))
    }

    fn prefixed_count(&self, prefix: &str) -> Option<usize> {
        let n: usize = self.params.entries().iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.len()).sum();
        (n > 0).then_some(n)
    }

    pub fn has_record(&self) -> bool {
        self.record.is_some()
    }

    pub fn clear_record(&mut self) {
        self.record = None;
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> RegistrationModel<U> {
        let mut m = RegistrationModel::<U>::layout(self.config, self.seed).expect("validated config");
        for (d, s) in m.params.values_mut().iter_mut().zip(self.params.values()) {
            *d = U::of(s.f64());
        }
        m
    }

    /// Copies every encoder entry from `source`. Decoder weights are untouched.
    pub fn transfer_encoder_from<U: Real>(&mut self, source: &RegistrationModel<U>) -> Result<()> {
        if !self.config.encoder_compatible(&source.config) {
            return Err(Error::ConfigMismatch(format!(
                "encoder {}x{} vs {}x{}",
                source.config.stages, source.config.base_channels, self.config.stages, self.config.base_channels
            )));
        }
        for name in self.encoder_entry_names() {
            let src = source.params.get(&name).ok_or_else(|| Error::ConfigMismatch(format!("missing {name}")))?;
            let dst = self.params.get_mut(&name).expect("own entry");
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::of(s.f64());
            }
        }
        self.record = None;
        Ok(())
    }

    fn input(&self, f: &ScalarVolume<T>, m: &ScalarVolume<T>) -> Result<Tensor<T>> {
        f.shape().ensure_same(&m.shape())?;
        self.config.check_input(f.shape())?;
        Ok(Tensor::from_planes(f.shape().dims(), &[f.data(), m.data()]))
    }

    fn encode(&self, input: Tensor<T>) -> EncoderRecord<T> {
        let p = self.params.values();
        let mut pre = Vec::with_capacity(self.encoder.len());
        let mut feats: Vec<Tensor<T>> = Vec::with_capacity(self.encoder.len());
        for (s, &spec) in self.encoder.iter().enumerate() {
            let x = if s == 0 { &input } else { &feats[s - 1] };
            let z = conv3d(x, p, spec);
            let f = avg_pool2(&leaky_relu(&z));
            pre.push(z);
            feats.push(f);
        }
        EncoderRecord { input, pre, feats }
    }

    /// Stage feature maps for the pair; stage `k` has the input shape / 2^(k+1).
    pub fn encoder_forward(&self, f: &ScalarVolume<T>, m: &ScalarVolume<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.encode(self.input(f, m)?).feats)
    }

    fn decoders(&self) -> Result<(&[DecoderSpec], ConvSpec)> {
        match &self.arch {
            Arch::Pretrain { decoders, ensemble_head } => Ok((decoders, *ensemble_head)),
            Arch::Backbone { .. } => Err(Error::ConfigMismatch("operation needs a pretrain-mode model".into())),
        }
    }

    fn decode(&self, spec: DecoderSpec, feats: &Tensor<T>) -> (DecoderRecord<T>, Tensor<T>) {
        let p = self.params.values();
        let z1 = conv3d(feats, p, spec.conv1);
        let a1 = leaky_relu(&z1);
        let z2 = conv3d(&a1, p, spec.conv2);
        let h = leaky_relu(&z2);
        let out = conv3d(&h, p, spec.head);
        (DecoderRecord { z1, a1, z2, h }, out)
    }

    /// Two convolutions and a registration head on stage `stage` features.
    /// Returns the pre-head features and the stage-resolution Gaussian, whose
    /// mean is expressed in voxels of the `full` grid.
    pub fn lightweight_decode(
        &self,
        stage: usize,
        feats: &Tensor<T>,
        full: Shape3,
    ) -> Result<(Tensor<T>, GaussianField<T>)> {
        let (decoders, _) = self.decoders()?;
        let spec = *decoders.get(stage).ok_or_else(|| Error::InvalidConfig(format!("stage {stage} out of range")))?;
        let (rec, out) = self.decode(spec, feats);
        Ok((rec.h, split_head(&out, full)?))
    }

    /// Upsamples each pre-head feature map to `full`, averages them and
    /// applies the ensemble head.
    pub fn ensemble_aggregate(&self, pre_head: &[Tensor<T>], full: Shape3) -> Result<GaussianField<T>> {
        let (_, head) = self.decoders()?;
        let e = average_upsampled(pre_head, full.dims())?;
        split_head(&conv3d(&e, self.params.values(), head), full)
    }

    pub fn forward_pretrain(&mut self, f: &ScalarVolume<T>, m: &ScalarVolume<T>) -> Result<PretrainOutput<T>> {
        let input = self.input(f, m)?;
        let (decoders, ens_head) = self.decoders()?;
        let full = f.shape();
        let enc = self.encode(input);
        let mut dec = Vec::with_capacity(decoders.len());
        let mut stages = Vec::with_capacity(decoders.len());
        for (spec, feats) in decoders.iter().zip(&enc.feats) {
            let (rec, out) = self.decode(*spec, feats);
            stages.push(split_head(&out, full)?);
            dec.push(rec);
        }
        let hs: Vec<Tensor<T>> = dec.iter().map(|d| d.h.clone()).collect();
        let ensemble_in = average_upsampled(&hs, full.dims())?;
        let ensemble = split_head(&conv3d(&ensemble_in, self.params.values(), ens_head), full)?;
        let stages_full = stages.iter().map(|g| g.resample(full)).collect();
        let phi = scaling_and_squaring(&ensemble.mean, SsConfig::new(self.config.ss_steps)?);
        let warped = warp_scalar(m, &phi)?;
        self.record = Some(Record::Pretrain { enc, dec, ensemble_in });
        Ok(PretrainOutput { stages, stages_full, ensemble, phi, warped })
    }

    pub fn forward_backbone(&mut self, f: &ScalarVolume<T>, m: &ScalarVolume<T>) -> Result<BackboneOutput<T>> {
        let input = self.input(f, m)?;
        let (up, full_spec, head) = match &self.arch {
            Arch::Backbone { up, full, head } => (up, *full, *head),
            Arch::Pretrain { .. } => return Err(Error::ConfigMismatch("operation needs a backbone-mode model".into())),
        };
        let p = self.params.values();
        let enc = self.encode(input);
        let levels = up.len();
        let mut cats = vec![Tensor::zeros(0, [0; 3]); levels];
        let mut pres = vec![Tensor::zeros(0, [0; 3]); levels];
        let mut x = enc.feats[levels].clone();
        for s in (0..levels).rev() {
            let skip = &enc.feats[s];
            let cat = x.resample(skip.dims).concat(skip);
            let z = conv3d(&cat, p, up[s]);
            x = leaky_relu(&z);
            cats[s] = cat;
            pres[s] = z;
        }
        let full_cat = x.resample(enc.input.dims).concat(&enc.input);
        let full_pre = conv3d(&full_cat, p, full_spec);
        let full_act = leaky_relu(&full_pre);
        let v = conv3d(&full_act, p, head);
        let velocity = VectorField::from_vec(f.shape(), v.data, FieldKind::Velocity)?;
        let phi = scaling_and_squaring(&velocity, SsConfig::new(self.config.ss_steps)?);
        let warped = warp_scalar(m, &phi)?;
        self.record = Some(Record::Backbone { enc, cats, pres, full_cat, full_pre, full_act });
        Ok(BackboneOutput { velocity, phi, warped })
    }

    /// Parameter gradients of a pretraining forward pass given the loss
    /// gradients for the ensemble and the full-resolution stage fields.
    pub fn backward_pretrain(&self, ensemble: &GaussianGrad<T>, stages_full: &[GaussianGrad<T>]) -> Result<Vec<T>> {
        let (enc, dec, ensemble_in) = match &self.record {
            Some(Record::Pretrain { enc, dec, ensemble_in }) => (enc, dec, ensemble_in),
            _ => return Err(Error::MissingForward),
        };
        let (decoders, ens_head) = self.decoders()?;
        if stages_full.len() != decoders.len() {
            return Err(Error::ChannelMismatch(stages_full.len(), decoders.len()));
        }
        let p = self.params.values();
        let mut grads = vec![T::zero(); p.len()];
        let full = enc.input.dims;

        let g_ens = join_head(ensemble, full, [T::one(); 3])?;
        let mut g_e = conv3d_backward(ensemble_in, &g_ens, p, ens_head, &mut grads, true);
        g_e.scale(T::of(1.0 / decoders.len() as f64));

        let mut g_feats = Vec::with_capacity(decoders.len());
        for ((spec, rec), (feats, gs)) in decoders.iter().zip(dec).zip(enc.feats.iter().zip(stages_full)) {
            let sd = feats.dims;
            let g_full = join_head(gs, full, [T::one(); 3])?;
            let mut g_out = g_full.resample_adjoint(sd);
            let scale = unit_scale::<T>(sd, full);
            for c in 0..3 {
                g_out.plane_mut(c).iter_mut().for_each(|v| *v *= scale[c]);
            }
            let mut g_h = conv3d_backward(&rec.h, &g_out, p, spec.head, &mut grads, true);
            g_h.add_assign(&g_e.resample_adjoint(sd));
            leaky_relu_backward(&rec.z2, &mut g_h);
            let mut g_a1 = conv3d_backward(&rec.a1, &g_h, p, spec.conv2, &mut grads, true);
            leaky_relu_backward(&rec.z1, &mut g_a1);
            g_feats.push(conv3d_backward(feats, &g_a1, p, spec.conv1, &mut grads, true));
        }
        self.encoder_backward(enc, g_feats, &mut grads);
        Ok(grads)
    }

    /// Parameter gradients of a backbone forward pass given the gradient with
    /// respect to the predicted velocity.
    pub fn backward_backbone(&self, grad_velocity: &[T]) -> Result<Vec<T>> {
        let (enc, cats, pres, full_cat, full_pre, full_act) = match &self.record {
            Some(Record::Backbone { enc, cats, pres, full_cat, full_pre, full_act }) => {
                (enc, cats, pres, full_cat, full_pre, full_act)
            }
            _ => return Err(Error::MissingForward),
        };
        let Arch::Backbone { up, full, head } = &self.arch else {
            return Err(Error::MissingForward);
        };
        let p = self.params.values();
        let mut grads = vec![T::zero(); p.len()];
        let dims = enc.input.dims;
        if grad_velocity.len() != 3 * enc.input.voxels() {
            return Err(Error::LengthMismatch { expected: 3 * enc.input.voxels(), got: grad_velocity.len() });
        }
        let g_v = Tensor { channels: 3, dims, data: grad_velocity.to_vec() };
        let mut g = conv3d_backward(full_act, &g_v, p, *head, &mut grads, true);
        leaky_relu_backward(full_pre, &mut g);
        let g_cat = conv3d_backward(full_cat, &g, p, *full, &mut grads, true);
        let c0 = self.config.stage_channels(0);
        let mut g_x = g_cat.slice_channels(0, c0).resample_adjoint(enc.feats[0].dims);

        let mut g_feats: Vec<Tensor<T>> = enc.feats.iter().map(|f| Tensor::zeros(f.channels, f.dims)).collect();
        for s in 0..up.len() {
            leaky_relu_backward(&pres[s], &mut g_x);
            let g_c = conv3d_backward(&cats[s], &g_x, p, up[s], &mut grads, true);
            let c_up = self.config.stage_channels(s + 1);
            g_feats[s].add_assign(&g_c.slice_channels(c_up, self.config.stage_channels(s)));
            g_x = g_c.slice_channels(0, c_up).resample_adjoint(enc.feats[s + 1].dims);
        }
        let last = up.len();
        g_feats[last].add_assign(&g_x);
        self.encoder_backward(enc, g_feats, &mut grads);
        Ok(grads)
    }

    /// Adjoint of the encoder given gradients for every stage output.
    fn encoder_backward(&self, enc: &EncoderRecord<T>, mut g_feats: Vec<Tensor<T>>, grads: &mut [T]) {
        let p = self.params.values();
        for s in (0..self.encoder.len()).rev() {
            let g_f = std::mem::replace(&mut g_feats[s], Tensor::zeros(0, [0; 3]));
            let mut g = avg_pool2_backward(&g_f, enc.pre[s].dims);
            leaky_relu_backward(&enc.pre[s], &mut g);
            let x = if s == 0 { &enc.input } else { &enc.feats[s - 1] };
            let g_in = conv3d_backward(x, &g, p, self.encoder[s], grads, s > 0);
            if s > 0 {
                g_feats[s - 1].add_assign(&g_in);
            }
        }
    }
}

/// Per-axis factor converting stage voxels to full-grid voxels under
/// corner-aligned resampling.
fn unit_scale<T: Real>(stage: [usize; 3], f: [usize; 3]) -> [T; 3] {
    [0, 1, 2].map(|a| T::of((f[a] - 1) as f64 / (stage[a] - 1) as f64))
}

fn split_head<T: Real>(out: &Tensor<T>, full: Shape3) -> Result<GaussianField<T>> {
    let shape = Shape3::from_dims(out.dims)?;
    let scale = unit_scale::<T>(out.dims, full.dims());
    let n = out.voxels();
    let mut mean = out.data[..3 * n].to_vec();
    for c in 0..3 {
        mean[c * n..(c + 1) * n].iter_mut().for_each(|v| *v *= scale[c]);
    }
    Ok(GaussianField {
        mean: VectorField::from_vec(shape, mean, FieldKind::Velocity)?,
        log_variance: VectorField::from_vec(shape, out.data[3 * n..6 * n].to_vec(), FieldKind::Velocity)?,
    })
}

/// Stacks mean and log-variance gradients into a 6-channel tensor at `dims`,
/// multiplying the mean planes by `scale`.
fn join_head<T: Real>(g: &GaussianGrad<T>, dims: [usize; 3], scale: [T; 3]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    if g.mean.len() != 3 * n || g.log_variance.len() != 3 * n {
        return Err(Error::LengthMismatch { expected: 3 * n, got: g.mean.len() });
    }
    let mut t = Tensor::zeros(6, dims);
    for c in 0..3 {
        for (d, s) in t.plane_mut(c).iter_mut().zip(&g.mean[c * n..(c + 1) * n]) {
            *d = *s * scale[c];
        }
    }
    t.data[3 * n..].copy_from_slice(&g.log_variance);
    Ok(t)
}

fn average_upsampled<T: Real>(maps: &[Tensor<T>], dims: [usize; 3]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::InvalidConfig("no decoder features".into()))?;
    let mut e = Tensor::zeros(first.channels, dims);
    for h in maps {
        if h.channels != first.channels {
            return Err(Error::ChannelMismatch(h.channels, first.channels));
        }
        e.add_assign(&h.resample(dims));
    }
    e.scale(T::of(1.0 / maps.len() as f64));
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{pretrain_loss, LossWeights, NccConfig, RegistrationTarget};

    fn pair(s: Shape3) -> (ScalarVolume<f64>, ScalarVolume<f64>) {
        let f = ScalarVolume::from_fn(s, |[i, j, k]| (0.7 * i as f64).sin() + (0.5 * j as f64 - 0.3 * k as f64).cos());
        let m = ScalarVolume::from_fn(s, |[i, j, k]| {
            (0.6 * i as f64 + 0.2).sin() + (0.45 * j as f64).cos() * 0.9 + 0.1 * k as f64
        });
        (f, m)
    }

    fn tiny(mode: ModelMode) -> ModelConfig {
        ModelConfig { stages: 2, base_channels: 2, decoder_channels: 2, mode, ss_steps: 4 }
    }

    #[test]
    fn shapes_halve_per_stage() {
        let s = Shape3::cube(16).unwrap();
        let (f, m) = pair(s);
        for k in [2, 3] {
            let model = RegistrationModel::<f64>::new(ModelConfig { stages: k, ..ModelConfig::default() }, 1).unwrap();
            let feats = model.encoder_forward(&f, &m).unwrap();
            for (i, t) in feats.iter().enumerate() {
                assert_eq!(t.dims, [16 >> (i + 1); 3]);
                assert_eq!(t.channels, 8 << i);
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let s = Shape3::cube(12).unwrap();
        let (f, m) = pair(s);
        let model = RegistrationModel::<f64>::new(ModelConfig::default(), 1).unwrap();
        assert!(model.encoder_forward(&f, &m).is_err());
    }

    #[test]
    fn zero_heads_give_identity() {
        let s = Shape3::cube(8).unwrap();
        let (f, m) = pair(s);
        let mut pm = RegistrationModel::<f64>::new(tiny(ModelMode::Pretrain), 3).unwrap();
        let out = pm.forward_pretrain(&f, &m).unwrap();
        assert_eq!(out.warped, m);
        assert!(out.stages.iter().all(|g| g.mean.max_abs() == 0.0));
        let mut bm = RegistrationModel::<f64>::new(tiny(ModelMode::Backbone), 3).unwrap();
        assert_eq!(bm.forward_backbone(&f, &m).unwrap().warped, m);
    }

    #[test]
    fn backbone_is_larger_and_decoders_are_light() {
        let p = RegistrationModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let b = RegistrationModel::<f32>::new(ModelConfig::default().with_mode(ModelMode::Backbone), 0).unwrap();
        assert!(b.param_count() > p.param_count());
        let k = ModelConfig::default().stages;
        for s in 0..k {
            let light = p.decoder_param_count(s).unwrap();
            let heavy = b.backbone_stage_param_count(s.min(k - 2)).unwrap();
            assert!(light < heavy, "stage {s}: {light} vs {heavy}");
        }
    }

    #[test]
    fn backward_requires_forward() {
        let model = RegistrationModel::<f64>::new(tiny(ModelMode::Backbone), 0).unwrap();
        assert!(matches!(model.backward_backbone(&[]), Err(Error::MissingForward)));
    }

    #[test]
    fn transfer_checks_config() {
        let src = RegistrationModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        let mut dst = RegistrationModel::<f32>::new(
            ModelConfig { stages: 3, ..ModelConfig::default() }.with_mode(ModelMode::Backbone),
            2,
        )
        .unwrap();
        assert!(matches!(dst.transfer_encoder_from(&src), Err(Error::ConfigMismatch(_))));
        let mut ok = RegistrationModel::<f32>::new(ModelConfig::default().with_mode(ModelMode::Backbone), 2).unwrap();
        ok.transfer_encoder_from(&src).unwrap();
        for name in src.encoder_entry_names() {
            assert_eq!(ok.params().get(&name), src.params().get(&name));
        }
    }

    /// Randomises every parameter, heads included, so all paths are live.
    fn randomise(model: &mut RegistrationModel<f64>, seed: u64) {
        let mut x = seed;
        for v in model.params_mut().values_mut() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = 0.3 * (((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5);
        }
    }

    fn check(analytic: &[f64], f: impl Fn(&[f64]) -> f64, params: &[f64], picks: &[usize]) {
        for &i in picks {
            let h = 1e-5;
            let mut pp = params.to_vec();
            pp[i] += h;
            let mut pm = params.to_vec();
            pm[i] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn pretrain_gradient_matches_fd() {
        let s = Shape3::cube(8).unwrap();
        let (f, m) = pair(s);
        let mut model = RegistrationModel::<f64>::new(tiny(ModelMode::Pretrain), 5).unwrap();
        randomise(&mut model, 9);
        let weights = LossWeights { lambda: 0.5, eta: 0.3 };
        let ncc = NccConfig { window: 3, epsilon: 1e-5 };
        let ss = SsConfig::new(4).unwrap();
        let loss = |model: &mut RegistrationModel<f64>| {
            let out = model.forward_pretrain(&f, &m).unwrap();
            let target = RegistrationTarget::ncc(&f, &m, ncc);
            let l = pretrain_loss(&out.ensemble, &out.stages_full, &target, &weights, ss).unwrap();
            (l, out)
        };
        let (l, _) = loss(&mut model);
        let grads = model.backward_pretrain(&l.grad_ensemble, &l.grad_stages).unwrap();
        let base = model.params().values().to_vec();
        let eval = |p: &[f64]| {
            let mut mm = model.clone();
            mm.params_mut().values_mut().copy_from_slice(p);
            loss(&mut mm).0.total
        };
        let picks: Vec<usize> =
            model.params().entries().iter().flat_map(|e| [e.offset, e.offset + e.len() / 2]).collect();
        check(&grads, eval, &base, &picks);
    }

    #[test]
    fn backbone_gradient_matches_fd() {
        let s = Shape3::cube(8).unwrap();
        let (f, m) = pair(s);
        let mut model = RegistrationModel::<f64>::new(tiny(ModelMode::Backbone), 5).unwrap();
        randomise(&mut model, 10);
        let ncc = NccConfig { window: 3, epsilon: 1e-5 };
        let ss = SsConfig::new(4).unwrap();
        let loss = |model: &mut RegistrationModel<f64>| {
            let out = model.forward_backbone(&f, &m).unwrap();
            let target = RegistrationTarget::ncc(&f, &m, ncc);
            crate::losses::registration_objective(&out.velocity, &target, 0.5, ss).unwrap()
        };
        let r = loss(&mut model);
        let grads = model.backward_backbone(&r.grad_velocity).unwrap();
        let base = model.params().values().to_vec();
        let eval = |p: &[f64]| {
            let mut mm = model.clone();
            mm.params_mut().values_mut().copy_from_slice(p);
            loss(&mut mm).value(0.5)
        };
        let picks: Vec<usize> =
            model.params().entries().iter().flat_map(|e| [e.offset, e.offset + e.len() - 1]).collect();
        check(&grads, eval, &base, &picks);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let s = Shape3::cube(8).unwrap();
        let (f, m) = pair(s);
        let mut model = RegistrationModel::<f64>::new(tiny(ModelMode::Backbone), 5).unwrap();
        model.forward_backbone(&f, &m).unwrap();
        let g = model.backward_backbone(&vec![0.0; 3 * s.len()]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }
}
