use crate::error::{Error, Result};

/// Sinusoidal step encoding, interleaved `[sin(w0 t), cos(w0 t), sin(w1 t), ...]`
/// with `w_i = 10000^(-2i/d)` for `i = 0..d/2`.
pub fn time_embed(t: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("time embedding dimension must be even and positive, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / d as f64);
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    Ok(out)
}

/// Two-layer perceptron `W2 relu(W1 c + b1) + b2` reading its weights from
/// a flat parameter slice. `W1` is `hidden x input`, `W2` is `output x hidden`,
/// both row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondMlp {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl CondMlp {
    pub fn forward(&self, p: &[f64], c: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if c.len() != self.input {
            return Err(Error::shape(self.input, c.len()));
        }
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &p[self.w1 + h * self.input..self.w1 + (h + 1) * self.input];
                let z = p[self.b1 + h] + row.iter().zip(c).map(|(w, x)| w * x).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let out = (0..self.output)
            .map(|o| {
                let row = &p[self.w2 + o * self.hidden..self.w2 + (o + 1) * self.hidden];
                p[self.b2 + o] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        Ok((
            out,
            MlpCache {
                input: c.to_vec(),
                hidden,
            },
        ))
    }

    pub fn backward(&self, p: &[f64], cache: &MlpCache, dout: &[f64], g: &mut [f64]) {
        let mut dh = vec![0.0; self.hidden];
        for o in 0..self.output {
            g[self.b2 + o] += dout[o];
            for h in 0..self.hidden {
                g[self.w2 + o * self.hidden + h] += dout[o] * cache.hidden[h];
                dh[h] += dout[o] * p[self.w2 + o * self.hidden + h];
            }
        }
        for h in 0..self.hidden {
            if cache.hidden[h] <= 0.0 {
                continue;
            }
            g[self.b1 + h] += dh[h];
            for i in 0..self.input {
                g[self.w1 + h * self.input + i] += dh[h] * cache.input[i];
            }
        }
    }
}
