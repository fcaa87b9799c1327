//! Backend-agnostic op surface.
//!
//! Layer and network forward passes are written once against [`Ops`]. The
//! eager backend below evaluates tensors directly and optionally counts
//! multiply-accumulates; [`crate::autograd::Graph`] records the same calls
//! on a tape for reverse-mode differentiation.

use crate::conv::{self, ConvSpec, MacCounter};
use crate::error::Result;
use crate::ops::{self, Subsample};
use crate::tensor::{Shape, Tensor};

pub trait Ops {
    type Value: Clone;

    fn shape_of(&self, x: &Self::Value) -> Shape;
    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, spec: &ConvSpec) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, len: usize, wrap: bool) -> Result<Self::Value>;
    fn channel_shuffle(&mut self, x: &Self::Value, groups: usize) -> Result<Self::Value>;
    fn spatial_subsample(&mut self, x: &Self::Value, sub: &Subsample) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn maxpool2x2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn dense(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Direct evaluation on tensors.
#[derive(Debug, Default)]
pub struct Eager<'a> {
    counter: Option<&'a mut MacCounter>,
}

impl<'a> Eager<'a> {
    pub fn new() -> Self {
        Eager { counter: None }
    }

    pub fn counting(counter: &'a mut MacCounter) -> Self {
        Eager { counter: Some(counter) }
    }

    pub fn with_counter(counter: Option<&'a mut MacCounter>) -> Self {
        Eager { counter }
    }
}

impl Ops for Eager<'_> {
    type Value = Tensor;

    fn shape_of(&self, x: &Tensor) -> Shape {
        x.shape()
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
        conv::conv2d(x, w, spec, self.counter.as_deref_mut())
    }

    fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat_channels(&refs)
    }

    fn slice_channels(&mut self, x: &Tensor, start: usize, len: usize, wrap: bool) -> Result<Tensor> {
        ops::slice_channels(x, start, len, wrap)
    }

    fn channel_shuffle(&mut self, x: &Tensor, groups: usize) -> Result<Tensor> {
        ops::channel_shuffle(x, groups)
    }

    fn spatial_subsample(&mut self, x: &Tensor, sub: &Subsample) -> Result<Tensor> {
        ops::spatial_subsample(x, sub)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(x))
    }

    fn maxpool2x2(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::maxpool2x2(x)
    }

    fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::global_avg_pool(x)
    }

    fn dense(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::dense(x, w, b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }
}
