use rand::Rng;

use super::{insert_conv, Architecture};
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Element, Graph, ParamSet, Tensor, Var};

/// Plain conv backbone `X -> F` with `E_R = GAP(F)`.
///
/// Hidden blocks are conv + bias + ReLU; the last block is linear so that `F`
/// (and the embedding) can take either sign, like the encoder's output.
#[derive(Clone, Debug)]
pub struct RetrievalModel<E: Element = f32> {
    pub params: ParamSet<E>,
    strides: Vec<usize>,
    image_size: usize,
    image_channels: usize,
}

impl<E: Element> RetrievalModel<E> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut widths = vec![arch.image_channels];
        widths.extend(&arch.backbone_widths);
        widths.push(arch.feature_channels);
        for (i, w) in widths.windows(2).enumerate() {
            insert_conv(&mut params, &format!("block{i}"), w[1], w[0], 3, rng)?;
        }
        Ok(RetrievalModel {
            params,
            strides: arch.backbone_strides.clone(),
            image_size: arch.image_size,
            image_channels: arch.image_channels,
        })
    }

    /// Returns `(F, E_R)`; `F` is `(N, C, h, w)` and `E_R` is `(N, C)`.
    pub fn forward<'g>(
        &self,
        p: &BoundParams<'g, E>,
        x: Var<'g, E>,
    ) -> Result<(Var<'g, E>, Var<'g, E>)> {
        check_image(&x.shape(), self.image_channels, self.image_size)?;
        let last = self.strides.len() - 1;
        let mut h = x;
        for (i, &s) in self.strides.iter().enumerate() {
            h = conv_bias(p, &format!("block{i}"), h, s, 1)?;
            if i != last {
                h = h.relu();
            }
        }
        let e = h.global_average_pool()?;
        Ok((h, e))
    }

    /// Untracked forward for inference.
    pub fn embed(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let g = Graph::new();
        let p = self.params.bind_untracked(&g);
        let (f, e) = self.forward(&p, g.constant(x.clone()))?;
        Ok(((*f.value()).clone(), (*e.value()).clone()))
    }

    pub fn cast<F: Element>(&self) -> RetrievalModel<F> {
        RetrievalModel {
            params: self.params.cast(),
            strides: self.strides.clone(),
            image_size: self.image_size,
            image_channels: self.image_channels,
        }
    }
}

pub(crate) fn check_image(shape: &[usize], channels: usize, size: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels || shape[2] != size || shape[3] != size {
        return Err(Error::dim(
            "image batch",
            format!("expected (N, {channels}, {size}, {size}), got {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn conv_bias<'g, E: Element>(
    p: &BoundParams<'g, E>,
    name: &str,
    x: Var<'g, E>,
    stride: usize,
    padding: usize,
) -> Result<Var<'g, E>> {
    let y = x.conv2d(p.get(&format!("{name}.weight"))?, stride, padding)?;
    y.add(p.get(&format!("{name}.bias"))?)
}

/// The live 1×1 projection `T: C -> 1`.
#[derive(Clone, Debug)]
pub struct PatternGenerator<E: Element = f32> {
    pub params: ParamSet<E>,
}

impl<E: Element> PatternGenerator<E> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        params.insert(
            "weight",
            Tensor::randn(vec![1, arch.feature_channels, 1, 1], arch.pattern_init_std, rng),
        )?;
        params.insert("bias", Tensor::full(vec![1, 1, 1, 1], E::from_f64_lossy(arch.pattern_init_bias)))?;
        Ok(PatternGenerator { params })
    }

    /// `σ(T(F))` at feature resolution.
    pub fn forward<'g>(&self, p: &BoundParams<'g, E>, f: Var<'g, E>) -> Result<Var<'g, E>> {
        project(p, f)
    }

    pub fn cast<F: Element>(&self) -> PatternGenerator<F> {
        PatternGenerator {
            params: self.params.cast(),
        }
    }
}

fn project<'g, E: Element>(p: &BoundParams<'g, E>, f: Var<'g, E>) -> Result<Var<'g, E>> {
    let w = p.get("weight")?;
    let (fc, wc) = (f.shape()[1], w.shape()[1]);
    if fc != wc {
        return Err(Error::dim(
            "pattern_map",
            format!("features carry {fc} channels, projection expects {wc}"),
        ));
    }
    Ok(f.conv2d(w, 1, 0)?.add(p.get("bias")?)?.sigmoid())
}

/// Temporal average of the live generator. Its parameters are permanently
/// frozen and only move through `ema_update`.
#[derive(Clone, Debug)]
pub struct MeanGenerator<E: Element = f32> {
    params: ParamSet<E>,
}

impl<E: Element> MeanGenerator<E> {
    pub fn from_live(live: &PatternGenerator<E>) -> Self {
        let mut params = ParamSet::new();
        for (name, t) in live.params.iter() {
            params
                .insert(name, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("copy"))
                .expect("fresh set");
        }
        params.freeze();
        MeanGenerator { params }
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    /// Mutable access for EMA updates and checkpoint restore; the set stays frozen.
    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    /// `M̂ = σ(E(T)(F))`. Weights enter the graph as constants; `F` stays differentiable.
    pub fn forward<'g>(&self, g: &'g Graph<E>, f: Var<'g, E>) -> Result<Var<'g, E>> {
        let p = self.params.bind_untracked(g);
        project(&p, f)
    }

    pub fn cast<F: Element>(&self) -> MeanGenerator<F> {
        let mut params = self.params.cast();
        params.freeze();
        MeanGenerator { params }
    }
}

/// Linear head `E_R -> seen-class logits`.
#[derive(Clone, Debug)]
pub struct ClassifierHead<E: Element = f32> {
    pub params: ParamSet<E>,
    num_classes: usize,
}

impl<E: Element> ClassifierHead<E> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let std = (1.0 / arch.feature_channels as f64).sqrt();
        params.insert(
            "weight",
            Tensor::randn(vec![arch.num_seen_classes, arch.feature_channels], std, rng),
        )?;
        params.insert("bias", Tensor::zeros(vec![1, arch.num_seen_classes]))?;
        Ok(ClassifierHead {
            params,
            num_classes: arch.num_seen_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits<'g>(&self, p: &BoundParams<'g, E>, e: Var<'g, E>) -> Result<Var<'g, E>> {
        e.linear(p.get("weight")?)?.add(p.get("bias")?)
    }

    /// Mean softmax cross-entropy over seen categories.
    pub fn loss<'g>(
        &self,
        p: &BoundParams<'g, E>,
        e: Var<'g, E>,
        labels: &[usize],
    ) -> Result<Var<'g, E>> {
        self.logits(p, e)?.cross_entropy(labels)
    }

    pub fn cast<F: Element>(&self) -> ClassifierHead<F> {
        ClassifierHead {
            params: self.params.cast(),
            num_classes: self.num_classes,
        }
    }
}
