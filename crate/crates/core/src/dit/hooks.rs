use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flow::StepKey;
use crate::tensor::Tensor;

/// Per-block access to the value tensor `V[(text_len + L) × C]` of a hooked
/// block, before attention weighting. Returning a tensor replaces `V`.
pub trait ValueHook {
    fn on_value(&mut self, block: usize, v: &Tensor) -> Result<Option<Tensor>>;
}

/// Recorded value features keyed by solver evaluation and block index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValueCache {
    entries: BTreeMap<(StepKey, usize), Tensor>,
}

impl ValueCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: StepKey, block: usize, v: Tensor) {
        self.entries.insert((key, block), v);
    }

    pub fn get(&self, key: StepKey, block: usize) -> Result<&Tensor> {
        self.entries.get(&(key, block)).ok_or(Error::CacheMiss {
            step: key.step,
            phase: key.phase.as_str(),
            block,
        })
    }

    pub fn contains(&self, key: StepKey, block: usize) -> bool {
        self.entries.contains_key(&(key, block))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(StepKey, usize)> {
        self.entries.keys()
    }

    /// Distinct recorded step indices, ascending.
    pub fn steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.entries.keys().map(|(k, _)| k.step).collect();
        s.dedup();
        s
    }

    /// First missing `(step, block)` entry among main and midpoint
    /// evaluations of steps `1..=max_step`.
    pub fn check_coverage(&self, max_step: usize, blocks: &[usize]) -> Result<()> {
        for step in 1..=max_step {
            for key in [StepKey::main(step), StepKey::midpoint(step)] {
                for &b in blocks {
                    self.get(key, b)?;
                }
            }
        }
        Ok(())
    }

    pub fn scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

/// Keep the first `text_len` rows of `current` and blend the image rows as
/// `M∘current + (1 − M)∘cached`. `mask = None` takes the cached image rows.
pub fn fuse_values(current: &Tensor, cached: &Tensor, mask: Option<&Tensor>, text_len: usize) -> Result<Tensor> {
    if current.dims() != cached.dims() {
        return Err(Error::Shape(format!(
            "value fusion: current {:?} vs cached {:?}",
            current.dims(),
            cached.dims()
        )));
    }
    let (rows, c) = current.shape2()?;
    if text_len > rows {
        return Err(Error::Shape(format!("text_len {text_len} exceeds {rows} value rows")));
    }
    let l = rows - text_len;
    if let Some(m) = mask {
        if m.len() != l {
            return Err(Error::Contract(format!("mask has {} entries, image has {l} tokens", m.len())));
        }
    }
    let mut out = current.clone();
    let src = cached.data();
    let data = out.data_mut();
    for r in 0..l {
        let row = (text_len + r) * c;
        match mask {
            None => data[row..row + c].copy_from_slice(&src[row..row + c]),
            Some(m) => {
                let w = m.data()[r];
                if w == 1.0 {
                    continue;
                }
                let w = w as f64;
                for k in row..row + c {
                    data[k] = (w * data[k] as f64 + (1.0 - w) * src[k] as f64) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Stores every hooked value tensor under `key`.
pub struct Recorder<'a> {
    pub cache: &'a mut ValueCache,
    pub key: StepKey,
}

impl ValueHook for Recorder<'_> {
    fn on_value(&mut self, block: usize, v: &Tensor) -> Result<Option<Tensor>> {
        self.cache.insert(self.key, block, v.clone());
        Ok(None)
    }
}

/// Replaces image value tokens by the mask-guided blend with cached values.
pub struct Injector<'a> {
    pub cache: &'a ValueCache,
    pub key: StepKey,
    pub mask: Option<&'a Tensor>,
    pub text_len: usize,
}

impl ValueHook for Injector<'_> {
    fn on_value(&mut self, block: usize, v: &Tensor) -> Result<Option<Tensor>> {
        let cached = self.cache.get(self.key, block)?;
        fuse_values(v, cached, self.mask, self.text_len).map(Some)
    }
}

/// Forwards to `inner` and reports `(block, before, after)` to `tap`.
pub struct Tapped<'a, H> {
    pub inner: H,
    pub tap: &'a mut dyn FnMut(usize, &Tensor, &Tensor),
}

impl<H: ValueHook> ValueHook for Tapped<'_, H> {
    fn on_value(&mut self, block: usize, v: &Tensor) -> Result<Option<Tensor>> {
        let out = self.inner.on_value(block, v)?;
        (self.tap)(block, v, out.as_ref().unwrap_or(v));
        Ok(out)
    }
}
