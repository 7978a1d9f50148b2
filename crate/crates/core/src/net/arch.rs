use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the network: input sizes, encoder channel widths and decoder
/// hidden sizes.
///
/// Every encoder stage is a 3-wide convolution followed by ReLU. All stages
/// but the last are followed by a 2x max pool; the last is followed by global
/// average pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HatArchitecture {
    /// Input channels `C` (2 for one-stage detectors, 4 for two-stage).
    pub in_channels: usize,
    /// Spatial grid side `S` of the 2D input.
    pub grid_size: usize,
    /// Histogram length `L` of the 1D input.
    pub hist_len: usize,
    /// Regions per side; the 2D input is split into `k x k` patches.
    pub k: usize,
    pub enc2d: Vec<usize>,
    pub enc1d: Vec<usize>,
    pub local_enc: Vec<usize>,
    pub pn_hidden: usize,
    pub pc_hidden: usize,
    /// Multiplier on the softplus output of the count decoder.
    pub count_scale: f64,
}

impl Default for HatArchitecture {
    fn default() -> Self {
        Self {
            in_channels: 4,
            grid_size: 64,
            hist_len: 256,
            k: 4,
            enc2d: vec![16, 32, 64, 128],
            enc1d: vec![16, 32, 64],
            local_enc: vec![16, 32, 64],
            pn_hidden: 128,
            pc_hidden: 128,
            count_scale: 1.0,
        }
    }
}

impl HatArchitecture {
    pub fn patch_size(&self) -> usize {
        self.grid_size / self.k
    }

    pub fn regions(&self) -> usize {
        self.k * self.k
    }

    /// Length of the global feature vector.
    pub fn global_len(&self) -> usize {
        self.enc2d.last().copied().unwrap_or(0) + self.enc1d.last().copied().unwrap_or(0)
    }

    /// Length of each local feature vector.
    pub fn local_len(&self) -> usize {
        self.local_enc.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("arch: {m}")));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.k == 0 || self.grid_size == 0 || !self.grid_size.is_multiple_of(self.k) {
            return bad(format!(
                "k = {} must divide grid_size = {}",
                self.k, self.grid_size
            ));
        }
        for (name, stages, extent) in [
            ("enc2d", &self.enc2d, self.grid_size),
            ("enc1d", &self.enc1d, self.hist_len),
            ("local_enc", &self.local_enc, self.patch_size()),
        ] {
            if stages.is_empty() || stages.contains(&0) {
                return bad(format!("{name} needs at least one stage of width >= 1"));
            }
            let pools = stages.len() - 1;
            if pools >= usize::BITS as usize || extent >> pools == 0 {
                return bad(format!(
                    "{name}: {} pooling stages collapse an extent of {extent}",
                    pools
                ));
            }
        }
        if self.pn_hidden == 0 || self.pc_hidden == 0 {
            return bad("decoder hidden widths must be >= 1".into());
        }
        if !(self.count_scale > 0.0 && self.count_scale.is_finite()) {
            return bad("count_scale must be positive".into());
        }
        Ok(())
    }
}
