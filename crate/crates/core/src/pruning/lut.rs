use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::real::Real;

/// `[c_in, c_out, kernel, stride, fmap]`, where `fmap` is the input height.
pub type LutKey = [usize; 5];

/// Synthetic per-conv cost: `overhead + per_mac * c_in*c_out*k²*fmap²/stride²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_mac_ms: f64,
    pub overhead_ms: f64,
}

impl CostModel {
    pub const VERSION: u32 = 1;

    pub fn cost(&self, key: &LutKey) -> f64 {
        let [c_in, c_out, k, stride, fmap] = key.map(|v| v as f64);
        self.overhead_ms + self.per_mac_ms * c_in * c_out * k * k * fmap * fmap / (stride * stride)
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self { per_mac_ms: 1e-5, overhead_ms: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyLut {
    pub entries: BTreeMap<LutKey, f64>,
    pub generator: String,
}

/// `(layer index, key)` of every conv at its current shape.
pub fn conv_keys<T: Real>(model: &Model<T>) -> Result<Vec<(usize, LutKey)>> {
    let shapes = model.layer_input_shapes()?;
    Ok(model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Conv2d(c) => Some((i, [c.c_in(), c.c_out(), c.kernel(), c.stride, shapes[i][1]])),
            _ => None,
        })
        .collect())
}

/// Tabulates `cost` for every `(c_in', c_out') <= (c_in, c_out)` of every conv.
pub fn build_lut<T: Real>(model: &Model<T>, cost: &CostModel) -> Result<LatencyLut> {
    if !(cost.per_mac_ms > 0.0 && cost.overhead_ms > 0.0) {
        return Err(Error::invalid("cost model coefficients must be positive"));
    }
    let mut entries = BTreeMap::new();
    for (_, [c_in, c_out, k, s, f]) in conv_keys(model)? {
        for ci in 1..=c_in {
            for co in 1..=c_out {
                let key = [ci, co, k, s, f];
                entries.insert(key, cost.cost(&key));
            }
        }
    }
    Ok(LatencyLut {
        entries,
        generator: format!(
            "synthetic-v{} per_mac_ms={} overhead_ms={}",
            CostModel::VERSION,
            cost.per_mac_ms,
            cost.overhead_ms
        ),
    })
}

impl LatencyLut {
    pub fn get(&self, layer: usize, key: &LutKey) -> Result<f64> {
        self.entries
            .get(key)
            .copied()
            .ok_or(Error::MissingLutKey { layer, key: *key })
    }

    /// Sum of per-conv entries for a list of `(layer, key)`.
    pub fn total(&self, keys: &[(usize, LutKey)]) -> Result<f64> {
        keys.iter().map(|(l, k)| self.get(*l, k)).sum()
    }

    /// One `c_in c_out kernel stride fmap cost` record per line after a
    /// `# generator` header. Costs use the shortest exact decimal form.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n", self.generator);
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{} {} {} {} {} {v:?}", k[0], k[1], k[2], k[3], k[4]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format {
            source_name: "latency table".into(),
            reason: format!("line {}: {why}", line + 1),
        };
        let mut lines = text.lines().enumerate();
        let generator = match lines.next() {
            Some((_, h)) if h.starts_with("# ") => h[2..].to_string(),
            _ => return Err(bad(0, "missing `# generator` header")),
        };
        let mut entries = BTreeMap::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(bad(n, "expected 6 fields"));
            }
            let mut key = [0usize; 5];
            for (slot, f) in key.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| bad(n, "bad integer"))?;
            }
            let cost: f64 = fields[5].parse().map_err(|_| bad(n, "bad cost"))?;
            if !(cost > 0.0) {
                return Err(bad(n, "cost must be positive"));
            }
            entries.insert(key, cost);
        }
        Ok(Self { entries, generator })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Estimated latency: the sum of LUT entries over all convs; other layers are free.
pub fn estimate_latency<T: Real>(model: &Model<T>, lut: &LatencyLut) -> Result<f64> {
    lut.total(&conv_keys(model)?)
}
