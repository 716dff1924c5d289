use crate::numerics::{purpose, NumericsError, Rng, Tensor};

/// Fixed seeded stand-ins for the text encoder, the multimodal (semantic)
/// image encoder and the VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct MockEncoders {
    pub seed: u64,
    dim: usize,
    /// `[patch_dim, dim]` with orthonormal rows.
    vae: Tensor,
    /// `[patch_dim, dim]`.
    sem: Tensor,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

fn orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&basis).expect("rectangular")
}

impl MockEncoders {
    pub fn new(seed: u64, patch_dim: usize, dim: usize) -> Result<Self, NumericsError> {
        if patch_dim == 0 || patch_dim > dim {
            return Err(NumericsError::Invalid(format!("patch dim {patch_dim} must be in 1..={dim}")));
        }
        let mut rng = Rng::derive(seed, purpose::ENCODERS);
        let vae = orthonormal_rows(patch_dim, dim, &mut rng);
        let sem = rng.normal_tensor(&[patch_dim, dim], 1.0 / (patch_dim as f64).sqrt());
        Ok(Self { seed, dim, vae, sem })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[n, patch_dim]` → `[n, dim]`.
    pub fn vae_encode(&self, patches: &Tensor) -> Result<Tensor, NumericsError> {
        patches.matmul(&self.vae)
    }

    /// `[n, dim]` → `[n, patch_dim]`; exact inverse of [`Self::vae_encode`] on its range.
    pub fn vae_decode(&self, latents: &Tensor) -> Result<Tensor, NumericsError> {
        latents.matmul_nt(&self.vae)
    }

    pub fn sem_encode(&self, patches: &Tensor) -> Result<Tensor, NumericsError> {
        patches.matmul(&self.sem)
    }

    /// `[1, dim]` embedding of one word.
    pub fn text_embed(&self, word: &str) -> Tensor {
        let mut rng = Rng::derive(self.seed ^ fnv1a(word.as_bytes()), purpose::ENCODERS);
        rng.normal_tensor(&[1, self.dim], 1.0)
    }
}
