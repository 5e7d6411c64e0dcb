//! Occupancy configurations on a periodic lattice.

use serde::{Deserialize, Serialize};

/// Occupation numbers on the ring `Z/LZ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    occ: Vec<u32>,
}

impl Configuration {
    pub fn new(occ: Vec<u32>) -> Self {
        assert!(occ.len() >= 2, "ring needs at least two sites");
        Configuration { occ }
    }

    pub fn empty(len: usize) -> Self {
        Configuration::new(vec![0; len])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.occ.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Wraps an arbitrary signed coordinate onto the ring.
    #[inline]
    pub fn wrap(&self, x: i64) -> usize {
        let l = self.occ.len() as i64;
        x.rem_euclid(l) as usize
    }

    #[inline]
    pub fn get(&self, x: i64) -> u32 {
        self.occ[self.wrap(x)]
    }

    #[inline]
    pub fn set(&mut self, x: i64, v: u32) {
        let i = self.wrap(x);
        self.occ[i] = v;
    }

    pub fn occupancies(&self) -> &[u32] {
        &self.occ
    }

    pub fn total_particles(&self) -> u64 {
        self.occ.iter().map(|&k| u64::from(k)).sum()
    }

    /// Moves one particle from `from` to `to`. Panics if `from` is empty.
    #[inline]
    pub fn move_particle(&mut self, from: i64, to: i64) {
        let f = self.wrap(from);
        let t = self.wrap(to);
        assert!(self.occ[f] > 0, "moving a particle from an empty site");
        self.occ[f] -= 1;
        self.occ[t] += 1;
    }

    /// Lattice shift: `(tau_x eta)(z) = eta(x + z)`.
    pub fn shifted(&self, x: i64) -> Configuration {
        let l = self.occ.len();
        let mut out = vec![0; l];
        for (z, o) in out.iter_mut().enumerate() {
            *o = self.get(x + z as i64);
        }
        Configuration::new(out)
    }

    pub fn is_exclusion(&self) -> bool {
        self.occ.iter().all(|&k| k <= 1)
    }
}

/// Read access to occupancies in local (bond-relative) coordinates.
///
/// Rate functions only look at a finite window around a bond; implementing
/// this for both ring configurations and enumeration windows lets the same
/// rate code serve the engine and the exact checks.
pub trait Occupancies {
    fn at(&self, x: i64) -> u32;
}

impl Occupancies for Configuration {
    #[inline]
    fn at(&self, x: i64) -> u32 {
        self.get(x)
    }
}

/// A ring configuration viewed relative to bond `(x, x+1)`.
pub struct AtBond<'a> {
    pub config: &'a Configuration,
    pub bond: i64,
}

impl Occupancies for AtBond<'_> {
    #[inline]
    fn at(&self, x: i64) -> u32 {
        self.config.get(self.bond + x)
    }
}

/// A finite window of occupancies; index 0 of the window is local
/// coordinate `offset`.
pub struct Window<'a> {
    pub values: &'a [u32],
    pub offset: i64,
}

impl Occupancies for Window<'_> {
    #[inline]
    fn at(&self, x: i64) -> u32 {
        let i = x - self.offset;
        assert!(
            i >= 0 && (i as usize) < self.values.len(),
            "window access out of range: {x}"
        );
        self.values[i as usize]
    }
}
