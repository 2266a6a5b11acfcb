use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    /// Absolute positions `(row·d, col·d)`.
    Global,
    /// Offsets `((row − g/2)·d, (col − g/2)·d)` from the attending pixel.
    Local,
}

/// Which pixels each pixel attends to. Weight index `i` maps to grid cell
/// `(i / grid_w, i % grid_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dilation: usize,
    pub mode: GridMode,
}

impl ContextGrid {
    pub fn global(grid: usize, dilation: usize) -> Result<Self> {
        Self::new(grid, grid, dilation, GridMode::Global)
    }

    pub fn local(grid: usize, dilation: usize) -> Result<Self> {
        Self::new(grid, grid, dilation, GridMode::Local)
    }

    pub fn new(grid_h: usize, grid_w: usize, dilation: usize, mode: GridMode) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid {grid_h}x{grid_w} with dilation {dilation}: all must be >= 1"
            )));
        }
        if mode == GridMode::Local && (grid_h % 2 == 0 || grid_w % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "local grid {grid_h}x{grid_w} has no centre cell"
            )));
        }
        Ok(ContextGrid {
            grid_h,
            grid_w,
            dilation,
            mode,
        })
    }

    /// Global grid for a square map of side `extent`: 10×10 with dilation 3
    /// whenever it fits, else the largest `g ≤ 10` with `(g−1)·d + 1 = extent`.
    pub fn auto_global(extent: usize) -> Result<Self> {
        if extent == 0 {
            return Err(Error::InvalidArgument("empty feature map".into()));
        }
        if extent >= 28 {
            return Self::global(10, 3);
        }
        if extent == 1 {
            return Self::global(1, 1);
        }
        let g = (2..=10.min(extent))
            .rev()
            .find(|g| (extent - 1) % (g - 1) == 0)
            .expect("g = 2 always divides");
        Self::global(g, (extent - 1) / (g - 1))
    }

    /// Number of attended positions `D`.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Extent covered per axis: `(g − 1)·d + 1`.
    pub fn span(&self) -> (usize, usize) {
        (
            (self.grid_h - 1) * self.dilation + 1,
            (self.grid_w - 1) * self.dilation + 1,
        )
    }

    pub fn check_fits(&self, h: usize, w: usize) -> Result<()> {
        let (sh, sw) = self.span();
        if self.mode == GridMode::Global && (sh > h || sw > w) {
            return Err(Error::shape(
                "context grid",
                format!("global grid spans {sh}x{sw} on a {h}x{w} map"),
            ));
        }
        Ok(())
    }

    /// Source pixel of weight `i` for the pixel at `(y, x)` on an `h × w`
    /// map; `None` when a local tap falls off the map.
    #[inline]
    pub fn source(
        &self,
        y: usize,
        x: usize,
        i: usize,
        h: usize,
        w: usize,
    ) -> Option<(usize, usize)> {
        let (row, col) = (i / self.grid_w, i % self.grid_w);
        match self.mode {
            GridMode::Global => Some((row * self.dilation, col * self.dilation)),
            GridMode::Local => {
                let sy = y as isize
                    + (row as isize - (self.grid_h / 2) as isize) * self.dilation as isize;
                let sx = x as isize
                    + (col as isize - (self.grid_w / 2) as isize) * self.dilation as isize;
                (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w)
                    .then(|| (sy as usize, sx as usize))
            }
        }
    }
}

impl fmt::Display for ContextGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            GridMode::Global => "global",
            GridMode::Local => "local",
        };
        write!(
            f,
            "{mode} {}x{} d={}",
            self.grid_h, self.grid_w, self.dilation
        )
    }
}
