use serde::{Deserialize, Serialize};

use super::EulerError;

/// Boundary treatment along one axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Zero-gradient ghost cells. Only used to validate the scheme against
    /// isolated Riemann problems; conservation holds only for `Periodic`.
    Transmissive,
}

/// Uniform cell-centred grid on `[0, lx) x [0, ly)`.
///
/// Fields are stored row-major with `y` as the slow index: cell `(i, j)`
/// (x index `i`, y index `j`) lives at `j * nx + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    #[serde(default)]
    pub boundary_x: Boundary,
    #[serde(default)]
    pub boundary_y: Boundary,
}

impl GridSpec {
    pub const MIN_CELLS: usize = 8;

    /// Periodic unit square with `nx x ny` cells.
    pub fn new(nx: usize, ny: usize) -> Result<Self, EulerError> {
        let g = Self {
            nx,
            ny,
            lx: 1.0,
            ly: 1.0,
            boundary_x: Boundary::Periodic,
            boundary_y: Boundary::Periodic,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn square(n: usize) -> Result<Self, EulerError> {
        Self::new(n, n)
    }

    pub fn with_boundaries(mut self, x: Boundary, y: Boundary) -> Self {
        self.boundary_x = x;
        self.boundary_y = y;
        self
    }

    pub fn validate(&self) -> Result<(), EulerError> {
        if self.nx < Self::MIN_CELLS || self.ny < Self::MIN_CELLS {
            return Err(EulerError::InvalidGrid(format!(
                "need at least {m}x{m} cells, got {}x{}",
                self.nx,
                self.ny,
                m = Self::MIN_CELLS
            )));
        }
        if !(self.lx > 0.0 && self.ly > 0.0 && self.lx.is_finite() && self.ly.is_finite()) {
            return Err(EulerError::InvalidGrid(format!(
                "domain lengths must be positive, got {} x {}",
                self.lx, self.ly
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Cell-centre coordinates of cell `(i, j)`.
    #[inline]
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }

    pub fn periodic(&self) -> bool {
        self.boundary_x == Boundary::Periodic && self.boundary_y == Boundary::Periodic
    }

    /// Same cell counts and domain.
    pub fn compatible(&self, other: &GridSpec) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.lx == other.lx && self.ly == other.ly
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_grids() {
        assert!(GridSpec::new(7, 8).is_err());
        assert!(GridSpec::new(8, 8).is_ok());
    }

    #[test]
    fn spacing_and_centres() {
        let g = GridSpec::new(16, 8).unwrap();
        assert_eq!(g.dx(), 1.0 / 16.0);
        assert_eq!(g.dy(), 1.0 / 8.0);
        assert_eq!(g.center(0, 0), (1.0 / 32.0, 1.0 / 16.0));
        assert_eq!(g.index(3, 2), 35);
    }
}
