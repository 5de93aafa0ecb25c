//! Class-averaged channel descriptors per stage.
//!
//! For every stage the per-sample traces `x, z, I_l, q, p` of the
//! pre-attention features are averaged within each class, then across
//! classes. Channels are listed in ascending order of `q`. Averaging
//! shrinks `q`, so the reported `q` is the averaged vector standardised
//! again and the plain average is kept as `q_raw`.

use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::model::Model;
use crate::spatial::{standardize, DEFAULT_EPS_SIGMA};
use crate::tensor::Tensor;

/// Smoothing factor for the optional moving-average columns.
pub const EMA_FACTOR: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptorRow {
    pub channel: usize,
    pub x: f64,
    pub z: f64,
    pub local: f64,
    pub q: f64,
    pub q_raw: f64,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDescriptors {
    pub stage: usize,
    /// Sorted by ascending `q`.
    pub rows: Vec<DescriptorRow>,
    /// Mean absolute class-averaged `q` before re-standardisation.
    pub mean_abs_q_raw: f64,
    /// Smoothing factor of the `*_ema` columns, if any.
    pub smoothing: Option<f64>,
}

/// Exponential moving average `s_0 = y_0`, `s_t = a·s_{t-1} + (1-a)·y_t`.
pub fn ema(values: &[f64], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut prev = None;
    for &y in values {
        let s = match prev {
            None => y,
            Some(p) => factor * p + (1.0 - factor) * y,
        };
        out.push(s);
        prev = Some(s);
    }
    out
}

impl StageDescriptors {
    pub fn column(&self, f: impl Fn(&DescriptorRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    /// `rank,channel,x,z,I_l,q,q_raw,p` plus `z_ema,q_ema,p_ema` when
    /// smoothing is set. `p` is empty for models without attention.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let smoothed = self.smoothing.map(|a| {
            let p: Option<Vec<f64>> = self.rows.iter().map(|r| r.p).collect();
            (ema(&self.column(|r| r.z), a), ema(&self.column(|r| r.q), a), p.map(|p| ema(&p, a)))
        });
        write!(out, "rank,channel,x,z,I_l,q,q_raw,p")?;
        if smoothed.is_some() {
            write!(out, ",z_ema,q_ema,p_ema")?;
        }
        writeln!(out)?;
        for (rank, r) in self.rows.iter().enumerate() {
            write!(
                out,
                "{rank},{},{:?},{:?},{:?},{:?},{:?},{}",
                r.channel,
                r.x,
                r.z,
                r.local,
                r.q,
                r.q_raw,
                opt(r.p)
            )?;
            if let Some((z, q, p)) = &smoothed {
                write!(out, ",{:?},{:?},{}", z[rank], q[rank], opt(p.as_ref().map(|p| p[rank])))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

struct Accumulator {
    sums: Vec<Vec<f64>>,
}

impl Accumulator {
    fn new(fields: usize, channels: usize) -> Self {
        Accumulator {
            sums: vec![vec![0.0; channels]; fields],
        }
    }

    fn add(&mut self, field: usize, values: &Tensor) {
        for (s, v) in self.sums[field].iter_mut().zip(values.data()) {
            *s += v;
        }
    }
}

const X: usize = 0;
const Z: usize = 1;
const LOCAL: usize = 2;
const Q: usize = 3;
const P: usize = 4;

pub fn analyze_descriptors(model: &Model, data: &Dataset, smoothing: Option<f64>) -> Result<Vec<StageDescriptors>> {
    let stages = model.stages.len();
    let widths = &model.spec.stage_channels;
    // acc[stage][class]
    let mut acc: Vec<Vec<Accumulator>> = (0..stages)
        .map(|s| (0..data.num_classes).map(|_| Accumulator::new(5, widths[s])).collect())
        .collect();
    let counts = data.class_counts();
    let has_p = model.attention_blocks() > 0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let (_, traces) = model.trace(img)?;
        for (s, t) in traces.iter().enumerate() {
            let a = &mut acc[s][label];
            a.add(X, &t.x);
            a.add(Z, &t.z);
            a.add(LOCAL, &t.local);
            a.add(Q, &t.q);
            if let Some(p) = &t.p {
                a.add(P, p);
            }
        }
    }

    let present: Vec<usize> = (0..data.num_classes).filter(|&k| counts[k] > 0).collect();
    let mut out = Vec::with_capacity(stages);
    for (s, per_class) in acc.iter().enumerate() {
        let c = widths[s];
        let mut avg = vec![vec![0.0; c]; 5];
        for &k in &present {
            for (field, dst) in avg.iter_mut().enumerate() {
                for (d, v) in dst.iter_mut().zip(&per_class[k].sums[field]) {
                    *d += v / counts[k] as f64;
                }
            }
        }
        for field in &mut avg {
            field.iter_mut().for_each(|v| *v /= present.len() as f64);
        }
        let q_raw = Tensor::vector(avg[Q].clone());
        let (q, _) = standardize(&q_raw, DEFAULT_EPS_SIGMA);
        let mut rows: Vec<DescriptorRow> = (0..c)
            .map(|ch| DescriptorRow {
                channel: ch,
                x: avg[X][ch],
                z: avg[Z][ch],
                local: avg[LOCAL][ch],
                q: q.data()[ch],
                q_raw: avg[Q][ch],
                p: has_p.then_some(avg[P][ch]),
            })
            .collect();
        rows.sort_by(|a, b| a.q_raw.total_cmp(&b.q_raw).then(a.channel.cmp(&b.channel)));
        let mean_abs_q_raw = avg[Q].iter().map(|v| v.abs()).sum::<f64>() / c as f64;
        out.push(StageDescriptors {
            stage: s,
            rows,
            mean_abs_q_raw,
            smoothing,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_convention() {
        assert_eq!(ema(&[], 0.3), Vec::<f64>::new());
        let s = ema(&[1.0, 0.0, 0.0], 0.3);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 0.3).abs() < 1e-15);
        assert!((s[2] - 0.09).abs() < 1e-15);
        assert_eq!(ema(&[2.0, 2.0, 2.0], 0.3), vec![2.0, 2.0, 2.0]);
    }
}
