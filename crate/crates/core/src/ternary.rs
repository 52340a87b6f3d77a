//! Bit-packed ternary weight storage and MAC-less sampling kernels.
//!
//! A ternary weight matrix in {-alpha, 0, +alpha} is stored as two bitplanes:
//! a nonzero plane (bit set where the weight is not zero) and a sign plane
//! (bit set where it is positive, zero elsewhere, including every masked
//! position). The matvec kernel then runs on additions and subtractions
//! alone, with one multiplication by alpha per output element at the end.
//!
//! Bit order is little-endian within each 64-bit word: element `j` of a row
//! lives in word `j / 64`, bit `j % 64`. Each row is padded to a word
//! boundary with zero bits, and the serialized "ATPK" format stores the
//! planes as little-endian words in that same layout.

use crate::error::{Error, Result};
use crate::sampling::{SamplerMode, SamplingLayer};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ATPK";
const FORMAT_VERSION: u32 = 1;
/// magic + version + 4 u32 dims + alpha + sparsity.
const HEADER_BYTES: usize = 4 + 4 + 4 * 4 + 8 + 8;

/// Two-bitplane encoding of a `{-alpha, 0, +alpha}` sampling matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    in_channels: usize,
    block_size: usize,
    alpha: f64,
    sparsity: f64,
    nonzero: Vec<u64>,
    sign: Vec<u64>,
}

/// Byte cost of the packed encoding next to single-precision floats.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StorageReport {
    pub packed_bytes: usize,
    pub float_bytes: usize,
    pub ratio: f64,
}

fn row_words(cols: usize) -> usize {
    cols.div_ceil(64)
}

impl PackedTernaryMatrix {
    /// Encodes weights whose every element is exactly `-alpha`, `0` or
    /// `+alpha`. Rows are the sampler's output channels; columns run over
    /// `(channel, y, x)` of one flattened block.
    pub fn pack<T: Scalar>(
        weights: &[T],
        rows: usize,
        in_channels: usize,
        block_size: usize,
        alpha: T,
    ) -> Result<Self> {
        let cols = in_channels * block_size * block_size;
        if weights.len() != rows * cols {
            return Err(Error::shape(
                "pack",
                format!("{} weights for {rows} rows x {cols} cols", weights.len()),
            ));
        }
        let words = row_words(cols);
        let mut nonzero = vec![0u64; rows * words];
        let mut sign = vec![0u64; rows * words];
        let mut zeros = 0usize;
        let pos = alpha;
        let neg = -alpha;
        for (index, &w) in weights.iter().enumerate() {
            let (r, j) = (index / cols, index % cols);
            let word = r * words + j / 64;
            let bit = 1u64 << (j % 64);
            if w == T::zero() {
                zeros += 1;
            } else if w == pos {
                nonzero[word] |= bit;
                sign[word] |= bit;
            } else if w == neg {
                nonzero[word] |= bit;
            } else {
                return Err(Error::Quantization {
                    index,
                    value: w.as_f64(),
                    alpha: alpha.as_f64(),
                });
            }
        }
        Ok(PackedTernaryMatrix {
            rows,
            cols,
            in_channels,
            block_size,
            alpha: alpha.as_f64(),
            sparsity: zeros as f64 / (rows * cols) as f64,
            nonzero,
            sign,
        })
    }

    /// Packs a sampling layer that is in ternary mode.
    pub fn from_sampler<T: Scalar>(layer: &SamplingLayer<T>) -> Result<Self> {
        if layer.mode() != SamplerMode::Ternary {
            return Err(Error::Config(format!(
                "packing requires a ternary-mode sampler, found {:?}",
                layer.mode()
            )));
        }
        let cfg = layer.config();
        PackedTernaryMatrix::pack(
            &layer.effective_weight_values(),
            layer.out_channels(),
            cfg.in_channels,
            cfg.block_size,
            layer.alpha().value()[0],
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn block_size(&self) -> usize {
        self.block_size
    }
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    /// Number of set bits in the nonzero plane (the surviving weights).
    pub fn nonzero_count(&self) -> usize {
        self.nonzero.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn check_canonical(&self) -> Result<()> {
        let words = row_words(self.cols);
        for (i, (&nz, &sg)) in self.nonzero.iter().zip(&self.sign).enumerate() {
            if sg & !nz != 0 {
                return Err(Error::Format {
                    what: "packed ternary matrix",
                    detail: format!("sign bits set outside the nonzero plane in word {i}"),
                });
            }
            let tail_bits = self.cols % 64;
            if tail_bits != 0 && (i % words) == words - 1 {
                let pad_mask = !0u64 << tail_bits;
                if nz & pad_mask != 0 || sg & pad_mask != 0 {
                    return Err(Error::Format {
                        what: "packed ternary matrix",
                        detail: format!("padding bits set in word {i}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Exact ternary values back from the planes.
    pub fn unpack<T: Scalar>(&self) -> Result<Vec<T>> {
        self.check_canonical()?;
        let words = row_words(self.cols);
        let alpha = T::of_f64(self.alpha);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for j in 0..self.cols {
                let word = r * words + j / 64;
                let bit = 1u64 << (j % 64);
                out.push(if self.nonzero[word] & bit == 0 {
                    T::zero()
                } else if self.sign[word] & bit != 0 {
                    alpha
                } else {
                    -alpha
                });
            }
        }
        Ok(out)
    }

    /// MAC-less matrix-vector product: per row, signed sums of the selected
    /// inputs accumulated at double precision, then one alpha scale.
    pub fn matvec<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "ternary_matvec",
                format!("input length {} does not match column count {}", x.len(), self.cols),
            ));
        }
        let words = row_words(self.cols);
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0f64;
            for w in 0..words {
                let base = w * 64;
                let nz = self.nonzero[r * words + w];
                let sg = self.sign[r * words + w];
                let mut plus = nz & sg;
                while plus != 0 {
                    let b = plus.trailing_zeros() as usize;
                    acc += x[base + b].as_f64();
                    plus &= plus - 1;
                }
                let mut minus = nz & !sg;
                while minus != 0 {
                    let b = minus.trailing_zeros() as usize;
                    acc -= x[base + b].as_f64();
                    minus &= minus - 1;
                }
            }
            out.push(T::of_f64(self.alpha * acc));
        }
        Ok(out)
    }

    /// Packed realization of block-based sampling: flattens each
    /// `block_size x block_size` block and runs [`Self::matvec`] on it.
    /// Same contract as the float sampler in ternary mode.
    pub fn sample<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let bs = self.block_size;
        let s = image.shape();
        if s.channels() != self.in_channels {
            return Err(Error::shape(
                "ternary_sample",
                format!(
                    "image channel extent {} does not match packed in_channels {}",
                    s.channels(),
                    self.in_channels
                ),
            ));
        }
        if s.height() < bs || s.width() < bs {
            return Err(Error::InputTooSmall {
                height: s.height(),
                width: s.width(),
                block_size: bs,
            });
        }
        if s.height() % bs != 0 || s.width() % bs != 0 {
            return Err(Error::InputNotDivisible {
                height: s.height(),
                width: s.width(),
                block_size: bs,
            });
        }
        let (bh, bw) = (s.height() / bs, s.width() / bs);
        let out_shape = Shape::new(s.batch(), self.rows, bh, bw);
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut block = vec![T::zero(); self.cols];
        for b in 0..s.batch() {
            for by in 0..bh {
                for bx in 0..bw {
                    let mut j = 0;
                    for c in 0..self.in_channels {
                        for u in 0..bs {
                            for v in 0..bs {
                                block[j] = image.at(b, c, by * bs + u, bx * bs + v);
                                j += 1;
                            }
                        }
                    }
                    for (r, m) in self.matvec(&block)?.into_iter().enumerate() {
                        out[out_shape.index(b, r, by, bx)] = m;
                    }
                }
            }
        }
        Tensor::from_vec(out_shape, out)
    }

    /// Packed size (2 bits per element in word-padded rows, plus the file
    /// header) against 4-byte floats.
    pub fn storage_report(&self) -> StorageReport {
        let plane_bytes = self.rows * row_words(self.cols) * 8;
        let packed_bytes = HEADER_BYTES + 2 * plane_bytes;
        let float_bytes = 4 * self.rows * self.cols;
        StorageReport {
            packed_bytes,
            float_bytes,
            ratio: float_bytes as f64 / packed_bytes as f64,
        }
    }

    // ── "ATPK" serialization ───────────────────────────────────────────

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))
    }

    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        w.write_u32::<LittleEndian>(self.in_channels as u32)?;
        w.write_u32::<LittleEndian>(self.block_size as u32)?;
        w.write_f64::<LittleEndian>(self.alpha)?;
        w.write_f64::<LittleEndian>(self.sparsity)?;
        for &word in self.nonzero.iter().chain(&self.sign) {
            w.write_u64::<LittleEndian>(word)?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read(&mut r).map_err(|e| match e {
            ReadError::Io(e) => Error::io(path, e),
            ReadError::Format(detail) => Error::Format {
                what: "ATPK file",
                detail,
            },
        })
    }

    fn read(r: &mut impl Read) -> std::result::Result<Self, ReadError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReadError::Format(format!("bad magic {magic:?}, expected \"ATPK\"")));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(ReadError::Format(format!("unsupported version {version}")));
        }
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let in_channels = r.read_u32::<LittleEndian>()? as usize;
        let block_size = r.read_u32::<LittleEndian>()? as usize;
        if cols != in_channels * block_size * block_size {
            return Err(ReadError::Format(format!(
                "column count {cols} inconsistent with {in_channels} channels of {block_size}x{block_size} blocks"
            )));
        }
        let alpha = r.read_f64::<LittleEndian>()?;
        let sparsity = r.read_f64::<LittleEndian>()?;
        let words = rows * row_words(cols);
        let mut read_plane = |r: &mut dyn Read| -> std::result::Result<Vec<u64>, ReadError> {
            let mut plane = Vec::with_capacity(words);
            for _ in 0..words {
                plane.push(r.read_u64::<LittleEndian>()?);
            }
            Ok(plane)
        };
        let nonzero = read_plane(r)?;
        let sign = read_plane(r)?;
        let packed = PackedTernaryMatrix {
            rows,
            cols,
            in_channels,
            block_size,
            alpha,
            sparsity,
            nonzero,
            sign,
        };
        packed
            .check_canonical()
            .map_err(|e| ReadError::Format(e.to_string()))?;
        Ok(packed)
    }
}

enum ReadError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::sampling::{Mask, SamplerConfig};

    fn random_ternary(rows: usize, in_c: usize, bs: usize, alpha: f64, rng: &mut DetRng) -> Vec<f64> {
        (0..rows * in_c * bs * bs)
            .map(|_| match rng.below(3) {
                0 => 0.0,
                1 => alpha,
                _ => -alpha,
            })
            .collect()
    }

    #[test]
    fn pack_encoding_definition() {
        // Elements [+a, 0, -a, +a]: nonzero plane "1011", sign plane "1001"
        // in element order, i.e. bits {0,2,3} and {0,3} of the first word.
        let p = PackedTernaryMatrix::pack(&[0.5f64, 0.0, -0.5, 0.5], 1, 1, 2, 0.5).unwrap();
        assert_eq!(p.nonzero, vec![0b1101]);
        assert_eq!(p.sign, vec![0b1001]);
        assert_eq!(p.sparsity(), 0.25);
    }

    #[test]
    fn pack_all_zero() {
        let p = PackedTernaryMatrix::pack(&[0.0f32; 16], 1, 1, 4, 0.7).unwrap();
        assert!(p.nonzero.iter().all(|&w| w == 0));
        assert!(p.sign.iter().all(|&w| w == 0));
        assert_eq!(p.unpack::<f32>().unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn pack_rejects_non_ternary_value() {
        let err = PackedTernaryMatrix::pack(&[0.5f64, 0.3, 0.0, -0.5], 1, 1, 2, 0.5).unwrap_err();
        match err {
            Error::Quantization { index, value, .. } => {
                assert_eq!(index, 1);
                assert_eq!(value, 0.3);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let mut rng = DetRng::from_seed_u64(40);
        for &(rows, bs, alpha) in &[(7usize, 3usize, 0.25f64), (5, 8, 1.5), (3, 9, 0.1)] {
            let w = random_ternary(rows, 1, bs, alpha, &mut rng);
            let p = PackedTernaryMatrix::pack(&w, rows, 1, bs, alpha).unwrap();
            assert_eq!(p.unpack::<f64>().unwrap(), w);
        }
        // Single precision too.
        let w: Vec<f32> = random_ternary(4, 2, 5, 0.3, &mut rng).iter().map(|&v| v as f32).collect();
        let p = PackedTernaryMatrix::pack(&w, 4, 2, 5, 0.3f32).unwrap();
        assert_eq!(p.unpack::<f32>().unwrap(), w);
    }

    #[test]
    fn unpack_rejects_non_canonical_sign_bits() {
        let mut p = PackedTernaryMatrix::pack(&[0.5f64, 0.0, -0.5, 0.5], 1, 1, 2, 0.5).unwrap();
        p.sign[0] |= 0b0010; // sign bit where nonzero is 0
        let err = p.unpack::<f64>().unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn matvec_against_dense_oracle() {
        // Rows [[+1, 0, -1], [0, +1, +1]] with alpha 0.5 on x = [2, 3, 4]:
        // raw signed sums [-2, 7], scaled [-1.0, 3.5].
        let w = [0.5f64, 0.0, -0.5, 0.0, 0.5, 0.5];
        let p = PackedTernaryMatrix::pack(&w, 2, 3, 1, 0.5).unwrap();
        let y = p.matvec(&[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![-1.0, 3.5]);

        assert_eq!(p.matvec(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);

        let zero_alpha = PackedTernaryMatrix::pack(&[0.0f64; 6], 2, 3, 1, 0.0).unwrap();
        assert_eq!(zero_alpha.matvec(&[2.0, 3.0, 4.0]).unwrap(), vec![0.0, 0.0]);

        assert!(p.matvec(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn matvec_matches_dense_float_oracle_randomized() {
        let mut rng = DetRng::from_seed_u64(41);
        let (rows, bs) = (6, 9); // 81 cols crosses a word boundary
        let w = random_ternary(rows, 1, bs, 0.75, &mut rng);
        let p = PackedTernaryMatrix::pack(&w, rows, 1, bs, 0.75).unwrap();
        let x: Vec<f64> = (0..bs * bs).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let y = p.matvec(&x).unwrap();
        for r in 0..rows {
            let want: f64 = (0..x.len()).map(|j| w[r * x.len() + j] * x[j]).sum();
            assert!((y[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn packed_sample_matches_float_sampler() {
        let mut rng = DetRng::from_seed_u64(42);
        let config = SamplerConfig::new(8, 0.25, 1).unwrap();
        let mut layer = SamplingLayer::<f32>::new(config, &mut rng).unwrap();
        let shape = layer.latent().shape();
        let mask: Vec<u8> = (0..shape.numel()).map(|_| rng.flip(2.0 / 3.0) as u8).collect();
        layer.ternarize(Mask::new(shape, mask).unwrap()).unwrap();
        layer.init_alpha();

        let packed = PackedTernaryMatrix::from_sampler(&layer).unwrap();
        let image = Tensor::<f32>::from_fn(Shape::new(2, 1, 16, 24), |_| rng.uniform() as f32);
        let float_path = layer.sample(&image).unwrap();
        let packed_path = packed.sample(&image).unwrap();
        assert_eq!(float_path.shape(), packed_path.shape());
        for (a, b) in float_path.data().iter().zip(packed_path.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn integer_inputs_with_unit_alpha_are_exact_integers() {
        let mut rng = DetRng::from_seed_u64(43);
        let w = random_ternary(5, 1, 8, 1.0, &mut rng);
        let p = PackedTernaryMatrix::pack(&w, 5, 1, 8, 1.0).unwrap();
        let x: Vec<f32> = (0..64).map(|_| rng.below(256) as f32).collect();
        for y in p.matvec(&x).unwrap() {
            assert_eq!(y, y.round());
        }
    }

    #[test]
    fn popcount_counts_unmasked_weights() {
        let mut rng = DetRng::from_seed_u64(44);
        let w = random_ternary(9, 1, 5, 0.4, &mut rng);
        let nonzero = w.iter().filter(|&&v| v != 0.0).count();
        let p = PackedTernaryMatrix::pack(&w, 9, 1, 5, 0.4).unwrap();
        assert_eq!(p.nonzero_count(), nonzero);
        let total = (9 * 25) as f64;
        assert!((p.nonzero_count() as f64 / total - (1.0 - p.sparsity())).abs() < 1e-12);
    }

    #[test]
    fn storage_report_arithmetic() {
        let mut rng = DetRng::from_seed_u64(45);
        // 1024 x 1024 weight matrix (bs = 32): 16x reduction territory.
        let w = random_ternary(1024, 1, 32, 0.5, &mut rng);
        let p = PackedTernaryMatrix::pack(&w, 1024, 1, 32, 0.5).unwrap();
        let report = p.storage_report();
        assert_eq!(report.float_bytes, 4_194_304);
        assert_eq!(report.packed_bytes, 262_144 + HEADER_BYTES);
        assert!(report.ratio > 15.9 && report.ratio < 16.1);

        // The mr = 0.25 sampler: 256 x 1024.
        let w = random_ternary(256, 1, 32, 0.5, &mut rng);
        let p = PackedTernaryMatrix::pack(&w, 256, 1, 32, 0.5).unwrap();
        let report = p.storage_report();
        assert_eq!(report.float_bytes, 1_048_576);
        assert_eq!(report.packed_bytes, 65_536 + HEADER_BYTES);

        // Degenerate single element: header dominates, ratio honestly < 1.
        let p = PackedTernaryMatrix::pack(&[0.5f64], 1, 1, 1, 0.5).unwrap();
        let report = p.storage_report();
        assert_eq!(report.float_bytes, 4);
        assert!(report.ratio < 1.0);
    }

    #[test]
    fn atpk_file_round_trip() {
        let mut rng = DetRng::from_seed_u64(46);
        let w = random_ternary(6, 1, 9, 0.325, &mut rng);
        let p = PackedTernaryMatrix::pack(&w, 6, 1, 9, 0.325).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atpk");
        p.write_to(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ATPK");

        let q = PackedTernaryMatrix::read_from(&path).unwrap();
        assert_eq!(p, q);

        // Corrupt a sign bit outside the nonzero plane: format error.
        let mut corrupt = bytes.clone();
        let nz_start = HEADER_BYTES;
        let sign_start = nz_start + 6 * 2 * 8;
        // Find a zero nonzero bit in row 0 word 0 and set the sign bit.
        let nz0 = u64::from_le_bytes(corrupt[nz_start..nz_start + 8].try_into().unwrap());
        let free_bit = (0..64u32).find(|&b| nz0 & (1 << b) == 0).unwrap();
        let sg0 = u64::from_le_bytes(corrupt[sign_start..sign_start + 8].try_into().unwrap());
        corrupt[sign_start..sign_start + 8].copy_from_slice(&(sg0 | (1 << free_bit)).to_le_bytes());
        let bad = dir.path().join("bad.atpk");
        std::fs::write(&bad, corrupt).unwrap();
        assert!(matches!(
            PackedTernaryMatrix::read_from(&bad),
            Err(Error::Format { .. })
        ));
    }
}
