//! Dense layers shared by every network in the crate.
//!
//! All layers act on row-major matrices `[rows, channels]`. A 1×1
//! convolution over a `B×C×H×W` map is the same dense map applied to the
//! `B·H·W` rows produced by [`Graph::nchw_to_rows`].

use crate::numerics::{Bind, Graph, NdArray, Param, Rng, Var};

/// Named access to trainable parameters.
pub trait Module {
    /// Parameters in a stable order, keyed by dotted path.
    fn params(&self) -> Vec<(String, &Param)>;

    /// Same order as [`Module::params`].
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    items
        .into_iter()
        .map(|(k, p)| (format!("{prefix}.{k}"), p))
        .collect()
}

/// `y = x·W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn from_weight(weight: NdArray, bias: Option<NdArray>) -> Self {
        assert_eq!(weight.shape().len(), 2);
        if let Some(b) = &bias {
            assert_eq!(b.len(), weight.shape()[1]);
        }
        Linear {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        }
    }

    /// Scaled-normal init with variance `gain² / in`.
    pub fn init(inputs: usize, outputs: usize, bias: bool, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (inputs as f64).sqrt();
        let w: Vec<f64> = (0..inputs * outputs).map(|_| std * rng.normal()).collect();
        Self::from_weight(
            NdArray::from_vec(&[inputs, outputs], w).unwrap(),
            bias.then(|| NdArray::zeros(&[outputs])),
        )
    }

    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self::from_weight(
            NdArray::zeros(&[inputs, outputs]),
            bias.then(|| NdArray::zeros(&[outputs])),
        )
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var, bind: Bind) -> Var {
        let w = g.param(&self.weight, bind);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = g.param(b, bind);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }
}

/// `rows × cols` matrix with orthonormal columns (rows ≥ cols) or
/// orthonormal rows (rows < cols), from Gram–Schmidt on a Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> NdArray {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // k orthonormal vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = rng.normals(n);
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = NdArray::zeros(&[rows, cols]);
    let d = out.data_mut();
    for (j, b) in basis.iter().enumerate() {
        for (i, &v) in b.iter().enumerate() {
            if rows >= cols {
                d[i * cols + j] = v;
            } else {
                d[j * cols + i] = v;
            }
        }
    }
    out
}
