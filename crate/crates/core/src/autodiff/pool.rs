use super::{Op, Real, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::par;

impl<T: Real> Tape<T> {
    /// 2x2x2 max pooling with stride 2.
    ///
    /// The gradient goes to the window maximum; ties resolve to the lowest
    /// linear index inside the window.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (c, ext) = self.shape(x).as_grid("max_pool2")?;
        for (d, axis) in ["z", "y", "x"].iter().enumerate() {
            if ext[d] % 2 != 0 {
                return Err(Error::invalid(
                    "max_pool2",
                    format!("extent along {axis} must be even, got {}", ext[d]),
                ));
            }
        }
        let o = ext.map(|e| e / 2);
        let (ilen, olen) = (ext.iter().product::<usize>(), o.iter().product::<usize>());
        let src = self.value(x);
        let mut argmax = vec![0u32; c * olen];
        par::for_each_chunk_mut(&mut argmax, olen, |ch, arg| {
            let plane = &src[ch * ilen..(ch + 1) * ilen];
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut best = usize::MAX;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((2 * oz + dz) * ext[1] + 2 * oy + dy) * ext[2]
                                        + 2 * ox
                                        + dx;
                                    if best == usize::MAX || plane[i] > plane[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        arg[(oz * o[1] + oy) * o[2] + ox] = best as u32;
                    }
                }
            }
        });
        let value = argmax
            .iter()
            .enumerate()
            .map(|(j, &i)| src[(j / olen) * ilen + i as usize])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::grid(c, o), value, Op::MaxPool { x, argmax }, rg))
    }
}

pub(super) fn backward<T: Real>(xshape: &Shape, argmax: &[u32], g: &[T]) -> Vec<T> {
    let ilen: usize = xshape.dims()[1..].iter().product();
    let olen = argmax.len() / xshape.dims()[0];
    let mut gx = vec![T::zero(); xshape.numel()];
    par::for_each_chunk_mut(&mut gx, ilen, |ch, plane| {
        for j in 0..olen {
            plane[argmax[ch * olen + j] as usize] += g[ch * olen + j];
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_of_one_to_eight() {
        let mut t = Tape::<f32>::new();
        let x = t
            .leaf(Shape::grid(1, [2, 2, 2]), (1..=8).map(|v| v as f32).collect(), true)
            .unwrap();
        let y = t.max_pool2(x).unwrap();
        assert_eq!(t.value(y), &[8.0]);
    }

    #[test]
    fn constant_input_routes_to_first_voxel() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(1, [4, 2, 2]), vec![3.0; 16], true).unwrap();
        let y = t.max_pool2(x).unwrap();
        assert_eq!(t.value(y), &[3.0, 3.0]);
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        // Window 0 starts at linear index 0, window 1 at (2*2*2) = 8.
        for (i, &v) in g.iter().enumerate() {
            let want = if i == 0 || i == 8 { 1.0 } else { 0.0 };
            assert_eq!(v, want, "index {i}");
        }
    }

    #[test]
    fn random_volume_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut vals: Vec<f64> = (0..2 * 64).map(|v| v as f64).collect();
        vals.shuffle(&mut rng);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::grid(2, [4, 4, 4]), vals.clone(), false).unwrap();
        let y = t.max_pool2(x).unwrap();
        for c in 0..2 {
            for oz in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut m = f64::MIN;
                        for z in 2 * oz..2 * oz + 2 {
                            for yy in 2 * oy..2 * oy + 2 {
                                for xx in 2 * ox..2 * ox + 2 {
                                    m = m.max(vals[c * 64 + (z * 4 + yy) * 4 + xx]);
                                }
                            }
                        }
                        assert_eq!(t.value(y)[c * 8 + (oz * 2 + oy) * 2 + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn odd_extent_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(1, [3, 2, 2]), vec![0.0; 12], true).unwrap();
        assert!(t.max_pool2(x).is_err());
    }
}
