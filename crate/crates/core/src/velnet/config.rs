use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Token-mixing branch used inside each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Dense channel map applied independently at every grid cell.
    PerCellDense,
    /// Multi-head softmax attention over all grid cells, no positional encoding.
    FullAttention,
}

impl std::str::FromStr for Mixing {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_cell_dense" => Ok(Mixing::PerCellDense),
            "full_attention" => Ok(Mixing::FullAttention),
            other => Err(format!("unknown mixing `{other}` (per_cell_dense | full_attention)")),
        }
    }
}

impl std::fmt::Display for Mixing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mixing::PerCellDense => "per_cell_dense",
            Mixing::FullAttention => "full_attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    pub grid: (usize, usize),
    pub hidden_dim: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub mixing: Mixing,
    pub attention_heads: usize,
    /// SwiGLU inner width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    /// Flow times are multiplied by this before the sinusoidal code. The
    /// rectified target differentiates through the code in `t`, so large
    /// scales amplify that term; 1000 diverges at desk scale.
    pub time_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 1,
            grid: (1, 1),
            hidden_dim: 32,
            depth: 2,
            embed_dim: 32,
            mixing: Mixing::PerCellDense,
            attention_heads: 4,
            ffn_mult: 2,
            time_scale: 10.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return invalid("net: channels and grid extents must be positive");
        }
        if self.hidden_dim == 0 || self.ffn_mult == 0 {
            return invalid("net: hidden_dim and ffn_mult must be positive");
        }
        if self.depth < 1 {
            return invalid("net: depth must be at least 1");
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return invalid(format!("net: embed_dim must be even and positive, got {}", self.embed_dim));
        }
        if self.mixing == Mixing::FullAttention
            && (self.attention_heads == 0 || !self.hidden_dim.is_multiple_of(self.attention_heads))
        {
            return invalid(format!(
                "net: hidden_dim {} not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn field_shape(&self) -> [usize; 3] {
        [self.channels, self.grid.0, self.grid.1]
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }
}
