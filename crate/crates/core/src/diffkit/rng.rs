use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::{numel_of, Tensor};

/// Counter-based random stream.
///
/// Output is a pure function of `(root_seed, path, counter)`: the key is
/// hashed from seed and path, and `counter` is the word position inside the
/// ChaCha8 keystream. Drawing never mutates a stream; it hands back the
/// advanced state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<u64>,
    counter: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a textual label.
pub fn label(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        RngStream {
            root_seed,
            path: Vec::new(),
            counter: 0,
        }
    }

    /// Independent sub-stream; the child starts at counter 0.
    pub fn child(&self, l: u64) -> Self {
        let mut path = self.path.clone();
        path.push(l);
        RngStream {
            root_seed: self.root_seed,
            path,
            counter: 0,
        }
    }

    pub fn child_named(&self, name: &str) -> Self {
        self.child(label(name))
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn key(&self) -> u64 {
        self.path
            .iter()
            .fold(splitmix(self.root_seed), |k, &l| splitmix(k ^ splitmix(l.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.key());
        g.set_word_pos(self.counter as u128);
        g
    }

    fn advanced(&self, g: &ChaCha8Rng) -> Self {
        RngStream {
            root_seed: self.root_seed,
            path: self.path.clone(),
            counter: g.get_word_pos() as u64,
        }
    }

    /// `n` i.i.d. standard normal draws and the advanced stream.
    pub fn normals(&self, n: usize) -> (Vec<f64>, RngStream) {
        let mut g = self.generator();
        let v = (0..n).map(|_| g.sample(StandardNormal)).collect();
        (v, self.advanced(&g))
    }

    /// `n` i.i.d. uniform draws on [0, 1) and the advanced stream.
    pub fn uniforms(&self, n: usize) -> (Vec<f64>, RngStream) {
        let mut g = self.generator();
        let v = (0..n).map(|_| g.random::<f64>()).collect();
        (v, self.advanced(&g))
    }

    pub fn gaussian(&self, shape: &[usize]) -> (Tensor, RngStream) {
        let (v, next) = self.normals(numel_of(shape));
        (Tensor::from_parts(shape.to_vec(), v), next)
    }

    /// In-place convenience over [`RngStream::gaussian`].
    pub fn draw_gaussian(&mut self, shape: &[usize]) -> Tensor {
        let (t, next) = self.gaussian(shape);
        *self = next;
        t
    }

    pub fn draw_normals(&mut self, n: usize) -> Vec<f64> {
        let (v, next) = self.normals(n);
        *self = next;
        v
    }

    pub fn draw_uniforms(&mut self, n: usize) -> Vec<f64> {
        let (v, next) = self.uniforms(n);
        *self = next;
        v
    }
}

/// Standard normal draws of the given shape.
pub fn gaussian(rng: &RngStream, shape: &[usize]) -> (Tensor, RngStream) {
    rng.gaussian(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let s = RngStream::new(7).child_named("x");
        let (a, na) = s.gaussian(&[3, 4]);
        let (b, nb) = s.gaussian(&[3, 4]);
        assert_eq!(a, b);
        assert_eq!(na, nb);
        let (c, _) = na.gaussian(&[3, 4]);
        assert_ne!(a, c);
    }

    #[test]
    fn moments() {
        let (v, _) = RngStream::new(1).normals(100_000);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.03, "var {var}");
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let root = RngStream::new(3).child_named("member");
        let (a, _) = root.child(1).normals(10_000);
        let (b, _) = root.child(2).normals(10_000);
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
        assert!((cov / (sa * sb)).abs() <= 0.05);
    }

    #[test]
    fn split_draws_equal_one_draw() {
        let s = RngStream::new(11);
        let (all, _) = s.uniforms(10);
        let (first, next) = s.uniforms(4);
        let (rest, _) = next.uniforms(6);
        assert_eq!(all[..4], first[..]);
        assert_eq!(all[4..], rest[..]);
    }
}
