//! Low-rank adapters: forward pass, merge, and the flat parameter layout.
//!
//! An adapter layer holds `A (r×k)` and `B (d×r)`; the update applied on top of
//! a frozen `W0 (d×k)` is `(alpha / r)·B·A`. Adapters flatten into a
//! [`ParameterVector`] in a fixed order: ascending layer id, `A` before `B`,
//! each matrix row-major.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::Array;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub layer_id: usize,
    /// `r × k`
    pub a: Array<f32>,
    /// `d × r`
    pub b: Array<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layer(&self, layer_id: usize) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Adapter with `B = 0` everywhere (and `A = 0`): a no-op on the base model.
    pub fn zeros(layout: &LayoutDescriptor) -> Self {
        unflatten(&ParameterVector::zeros(Arc::new(layout.clone())), layout)
            .expect("zero vector matches its own layout")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixRole {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer_id: usize,
    pub role: MatrixRole,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Shape of one adapted weight matrix `W0 (d×k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptedMatrix {
    pub layer_id: usize,
    pub d: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub rank: usize,
    pub alpha: f64,
    pub entries: Vec<LayoutEntry>,
    pub total_length: usize,
}

impl LayoutDescriptor {
    pub fn new(rank: usize, alpha: f64, matrices: &[AdaptedMatrix]) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be >= 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "LoRA alpha must be positive, got {alpha}"
            )));
        }
        let mut ms = matrices.to_vec();
        ms.sort_by_key(|m| m.layer_id);
        if ms.windows(2).any(|w| w[0].layer_id == w[1].layer_id) {
            return Err(Error::InvalidArgument(
                "duplicate layer id in layout".into(),
            ));
        }
        let mut entries = Vec::with_capacity(2 * ms.len());
        let mut offset = 0;
        for m in &ms {
            if rank > m.d.min(m.k) {
                return Err(Error::InvalidArgument(format!(
                    "rank {rank} exceeds min(d={}, k={}) of layer {}",
                    m.d, m.k, m.layer_id
                )));
            }
            for (role, rows, cols) in [(MatrixRole::A, rank, m.k), (MatrixRole::B, m.d, rank)] {
                entries.push(LayoutEntry {
                    layer_id: m.layer_id,
                    role,
                    rows,
                    cols,
                    offset,
                });
                offset += rows * cols;
            }
        }
        Ok(Self {
            rank,
            alpha,
            entries,
            total_length: offset,
        })
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(|e| e.layer_id).collect();
        ids.dedup();
        ids
    }

    pub fn matrices(&self) -> Vec<AdaptedMatrix> {
        self.entries
            .chunks(2)
            .map(|p| AdaptedMatrix {
                layer_id: p[0].layer_id,
                d: p[1].rows,
                k: p[0].cols,
            })
            .collect()
    }

    /// Layout restricted to `layer_ids`, plus the source range of every kept entry.
    pub fn restrict(
        &self,
        layer_ids: &[usize],
    ) -> Result<(LayoutDescriptor, Vec<std::ops::Range<usize>>)> {
        let kept: Vec<AdaptedMatrix> = self
            .matrices()
            .into_iter()
            .filter(|m| layer_ids.contains(&m.layer_id))
            .collect();
        if kept.len() != layer_ids.len() {
            return Err(Error::Layout(format!(
                "layers {layer_ids:?} not all present in layout"
            )));
        }
        let sub = LayoutDescriptor::new(self.rank, self.alpha, &kept)?;
        let ranges = self
            .entries
            .iter()
            .filter(|e| layer_ids.contains(&e.layer_id))
            .map(LayoutEntry::range)
            .collect();
        Ok((sub, ranges))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Harvested,
    Soup,
    Generated,
    Interpolated,
    Reconstructed,
}

/// Flat adapter weights tied to a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f32>,
    layout: Arc<LayoutDescriptor>,
    pub provenance: Provenance,
}

impl ParameterVector {
    pub fn new(
        values: Vec<f32>,
        layout: Arc<LayoutDescriptor>,
        provenance: Provenance,
    ) -> Result<Self> {
        if values.len() != layout.total_length {
            return Err(Error::Layout(format!(
                "vector has {} values, layout expects {}",
                values.len(),
                layout.total_length
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            values,
            layout,
            provenance,
        })
    }

    pub fn zeros(layout: Arc<LayoutDescriptor>) -> Self {
        Self {
            values: vec![0.0; layout.total_length],
            layout,
            provenance: Provenance::Harvested,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layout(&self) -> &Arc<LayoutDescriptor> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }
}

fn check_layer(w0: &Array<f32>, layer: &LoraLayer, rank: usize) -> Result<(usize, usize)> {
    let ws = w0.shape();
    let (a, b) = (layer.a.shape(), layer.b.shape());
    if ws.len() != 2 || rank == 0 || a != [rank, ws[1]] || b != [ws[0], rank] {
        return Err(Error::shape(
            "lora",
            format!("W0 {ws:?}, A {a:?}, B {b:?}, rank {rank}"),
        ));
    }
    Ok((ws[0], ws[1]))
}

/// `W0·x + (alpha/r)·B·(A·x)`.
pub fn lora_forward(
    w0: &Array<f32>,
    layer: &LoraLayer,
    alpha: f64,
    rank: usize,
    x: &[f32],
) -> Result<Vec<f32>> {
    let (d, k) = check_layer(w0, layer, rank)?;
    if x.len() != k {
        return Err(Error::shape(
            "lora_forward",
            format!("x has {} values, W0 is {d}x{k}", x.len()),
        ));
    }
    let scale = (alpha / rank as f64) as f32;
    let ax: Vec<f32> = (0..rank).map(|i| dot(layer.a.row(i), x)).collect();
    Ok((0..d)
        .map(|i| dot(w0.row(i), x) + scale * dot(layer.b.row(i), &ax))
        .collect())
}

/// `W0 + (alpha/r)·B·A`.
pub fn merge(w0: &Array<f32>, layer: &LoraLayer, alpha: f64, rank: usize) -> Result<Array<f32>> {
    let (d, k) = check_layer(w0, layer, rank)?;
    let scale = (alpha / rank as f64) as f32;
    let mut out = w0.clone();
    let (a, b) = (layer.a.data(), layer.b.data());
    for i in 0..d {
        for j in 0..k {
            let mut s = 0.0f32;
            for q in 0..rank {
                s += b[i * rank + q] * a[q * k + j];
            }
            out.data_mut()[i * k + j] += scale * s;
        }
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn flatten(adapter: &LoraAdapter, layout: &Arc<LayoutDescriptor>) -> Result<ParameterVector> {
    if adapter.rank != layout.rank || adapter.layers.len() * 2 != layout.entries.len() {
        return Err(Error::Layout(format!(
            "adapter (rank {}, {} layers) vs layout (rank {}, {} entries)",
            adapter.rank,
            adapter.layers.len(),
            layout.rank,
            layout.entries.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total_length);
    for e in &layout.entries {
        let layer = adapter
            .layer(e.layer_id)
            .ok_or_else(|| Error::Layout(format!("adapter lacks layer {}", e.layer_id)))?;
        let m = match e.role {
            MatrixRole::A => &layer.a,
            MatrixRole::B => &layer.b,
        };
        if m.shape() != [e.rows, e.cols] {
            return Err(Error::Layout(format!(
                "layer {} {:?} is {:?}, layout says {}x{}",
                e.layer_id,
                e.role,
                m.shape(),
                e.rows,
                e.cols
            )));
        }
        values.extend_from_slice(m.data());
    }
    ParameterVector::new(values, layout.clone(), Provenance::Harvested)
}

pub fn unflatten(vec: &ParameterVector, layout: &LayoutDescriptor) -> Result<LoraAdapter> {
    if vec.len() != layout.total_length {
        return Err(Error::Layout(format!(
            "vector has {} values, layout expects {}",
            vec.len(),
            layout.total_length
        )));
    }
    let mut layers: Vec<LoraLayer> = Vec::new();
    for pair in layout.entries.chunks(2) {
        let (ea, eb) = (&pair[0], &pair[1]);
        let a = Array::from_vec(&[ea.rows, ea.cols], vec.values()[ea.range()].to_vec())?;
        let b = Array::from_vec(&[eb.rows, eb.cols], vec.values()[eb.range()].to_vec())?;
        layers.push(LoraLayer {
            layer_id: ea.layer_id,
            a,
            b,
        });
    }
    Ok(LoraAdapter {
        rank: layout.rank,
        alpha: layout.alpha,
        layers,
    })
}
