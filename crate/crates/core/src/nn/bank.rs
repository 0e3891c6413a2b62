use ndarray::{s, Array4};

use super::encoder::{dihedral_in_place, Encoder};
use super::Real;
use crate::error::Result;
use crate::record::PatchPixels;

/// Encoder inputs pooled once up front so training epochs skip the
/// pixel-to-tensor conversion.
#[derive(Debug, Clone)]
pub struct InputBank {
    data: Array4<f32>,
}

impl InputBank {
    pub fn build(encoder: &Encoder, patches: &[&PatchPixels]) -> Result<Self> {
        Ok(InputBank {
            data: encoder.prepare_input(patches)?,
        })
    }

    pub fn len(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the selected samples into a fresh `(3, B, s, s)` batch, applying
    /// the matching dihedral transform code when given.
    pub fn gather<T: Real>(&self, picks: &[usize], codes: Option<&[u8]>) -> Array4<T> {
        let picks: Vec<(usize, usize)> = picks.iter().map(|&i| (0, i)).collect();
        gather_from(&[self], &picks, codes).expect("one bank")
    }
}

/// Gathers samples from several banks: `picks` holds `(bank, sample)` pairs.
pub fn gather_from<T: Real>(banks: &[&InputBank], picks: &[(usize, usize)], codes: Option<&[u8]>) -> Option<Array4<T>> {
    let first = banks.first()?;
    let (c, _, h, w) = first.data.dim();
    let mut out = Array4::<T>::zeros((c, picks.len(), h, w));
    for (bi, &(bank, src)) in picks.iter().enumerate() {
        for ci in 0..c {
            let from = banks[bank].data.slice(s![ci, src, .., ..]);
            out.slice_mut(s![ci, bi, .., ..])
                .zip_mut_with(&from, |o, &v| *o = T::from_f64_lossy(v as f64));
        }
        if let Some(codes) = codes {
            dihedral_in_place(&mut out, bi, codes[bi]);
        }
    }
    Some(out)
}
