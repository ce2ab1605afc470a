use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};

/// Topology parameters shared by the encoder, decoder, discriminator and
/// classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_channels: usize,
    /// Square image side in pixels; a power of two.
    pub input_size: usize,
    /// Number of stride-2 encoder blocks.
    pub depth: usize,
    pub base_channels: usize,
    /// Number of attribute values (races).
    pub num_attrs: usize,
    pub latent_channels: usize,
    pub leaky_slope: f64,
    /// Width of the discriminator's hidden fully connected layer.
    pub dis_hidden: usize,
    pub classifier_channels: Vec<usize>,
    pub classifier_stride: usize,
    /// Number of classifier blocks before the 2×2 max pool.
    pub classifier_pool_after: usize,
    pub dropout: f64,
}

impl ArchSpec {
    /// 3×256×256 input, six encoder blocks C16..C512, five races.
    pub fn full_scale() -> Self {
        Self {
            input_channels: 3,
            input_size: 256,
            depth: 6,
            base_channels: 16,
            num_attrs: 5,
            latent_channels: 512,
            leaky_slope: 0.2,
            dis_hidden: 512,
            classifier_channels: vec![512, 128, 64, 16],
            classifier_stride: 1,
            classifier_pool_after: 2,
            dropout: 0.3,
        }
    }

    /// Single-channel 32×32 input with four encoder blocks (latent 64×2×2).
    pub fn desk() -> Self {
        Self {
            input_channels: 1,
            input_size: 32,
            depth: 4,
            base_channels: 8,
            num_attrs: 5,
            latent_channels: 64,
            leaky_slope: 0.2,
            dis_hidden: 128,
            classifier_channels: vec![64, 32, 32, 16],
            classifier_stride: 1,
            classifier_pool_after: 2,
            dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_channels > 0, "input_channels must be positive");
        ensure!(
            self.input_size.is_power_of_two(),
            "input_size {} is not a power of two",
            self.input_size
        );
        ensure!(self.depth > 0, "depth must be positive");
        ensure!(
            self.depth < usize::BITS as usize && self.input_size >> self.depth >= 1,
            "input_size {} cannot be halved {} times",
            self.input_size,
            self.depth
        );
        ensure!(
            self.latent_size() >= 2,
            "latent spatial extent {} is too small for the discriminator (need >= 2)",
            self.latent_size()
        );
        ensure!(self.base_channels > 0, "base_channels must be positive");
        ensure!(self.num_attrs >= 2, "num_attrs must be at least 2, got {}", self.num_attrs);
        let top = self.base_channels.checked_shl(self.depth as u32 - 1).unwrap_or(usize::MAX);
        ensure!(
            self.latent_channels >= 1 && self.latent_channels <= top,
            "latent_channels {} must lie in [1, base_channels * 2^(depth-1) = {top}]",
            self.latent_channels
        );
        ensure!(
            self.leaky_slope >= 0.0 && self.leaky_slope.is_finite(),
            "leaky_slope must be finite and nonnegative"
        );
        ensure!(self.dis_hidden > 0, "dis_hidden must be positive");
        ensure!(
            !self.classifier_channels.is_empty() && self.classifier_channels.iter().all(|&c| c > 0),
            "classifier_channels must be nonempty and positive"
        );
        ensure!(self.classifier_stride > 0, "classifier_stride must be positive");
        ensure!(
            self.classifier_pool_after >= 1 && self.classifier_pool_after <= self.classifier_channels.len(),
            "classifier_pool_after {} must lie in [1, {}]",
            self.classifier_pool_after,
            self.classifier_channels.len()
        );
        ensure!((0.0..1.0).contains(&self.dropout), "dropout {} must lie in [0, 1)", self.dropout);
        Ok(())
    }

    /// Output channels of each encoder block.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i).min(self.latent_channels))
            .collect()
    }

    /// Spatial side of the latent map.
    pub fn latent_size(&self) -> usize {
        self.input_size >> self.depth
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [self.latent_channels, s, s]
    }

    /// Latent dimensionality: channels × side².
    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    /// `(input channels, output channels)` of each decoder block given the
    /// number of attribute planes appended before every block.
    pub fn decoder_channels(&self, attr_planes: usize) -> Vec<(usize, usize)> {
        let enc = self.encoder_channels();
        (0..self.depth)
            .map(|i| {
                let c_in = enc[self.depth - 1 - i] + attr_planes;
                let c_out = if i + 1 < self.depth {
                    enc[self.depth - 2 - i]
                } else {
                    self.input_channels
                };
                (c_in, c_out)
            })
            .collect()
    }

    /// Spatial side after every classifier block (post pooling where it applies).
    pub fn classifier_trace(&self) -> Result<Vec<usize>> {
        let mut s = self.latent_size();
        let mut out = Vec::with_capacity(self.classifier_channels.len());
        for i in 0..self.classifier_channels.len() {
            s = (s + 2 - 3) / self.classifier_stride + 1;
            if i + 1 == self.classifier_pool_after {
                if s < 2 || !s.is_multiple_of(2) {
                    return Err(invalid!(
                        "classifier: spatial extent {s} after block {} cannot be max-pooled by 2",
                        i + 1
                    ));
                }
                s /= 2;
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Width of the classifier's final fully connected layer input.
    pub fn classifier_fc_input(&self) -> Result<usize> {
        let s = *self.classifier_trace()?.last().expect("nonempty ladder");
        Ok(self.classifier_channels.last().unwrap() * s * s)
    }

    /// Canonical `key=value` lines, one per field, in declaration order.
    pub fn to_text(&self) -> String {
        let ladder: Vec<String> = self.classifier_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "input_channels={}\ninput_size={}\ndepth={}\nbase_channels={}\nnum_attrs={}\n\
             latent_channels={}\nleaky_slope={:?}\ndis_hidden={}\nclassifier_channels={}\n\
             classifier_stride={}\nclassifier_pool_after={}\ndropout={:?}\n",
            self.input_channels,
            self.input_size,
            self.depth,
            self.base_channels,
            self.num_attrs,
            self.latent_channels,
            self.leaky_slope,
            self.dis_hidden,
            ladder.join(","),
            self.classifier_stride,
            self.classifier_pool_after,
            self.dropout,
        )
    }

    /// Inverse of [`ArchSpec::to_text`]; unknown keys are skipped so headers
    /// can carry extra model metadata.
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_pairs(text)?;
        let get = |k: &str| -> Result<&str> {
            map.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| invalid!("architecture header lacks {k:?}"))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| invalid!("architecture field {k:?} is not an integer"))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| invalid!("architecture field {k:?} is not a number"))
        };
        let ladder = get("classifier_channels")?
            .split(',')
            .map(|c| c.parse().map_err(|_| invalid!("bad classifier_channels entry {c:?}")))
            .collect::<Result<Vec<usize>>>()?;
        let spec = Self {
            input_channels: int("input_channels")?,
            input_size: int("input_size")?,
            depth: int("depth")?,
            base_channels: int("base_channels")?,
            num_attrs: int("num_attrs")?,
            latent_channels: int("latent_channels")?,
            leaky_slope: float("leaky_slope")?,
            dis_hidden: int("dis_hidden")?,
            classifier_channels: ladder,
            classifier_stride: int("classifier_stride")?,
            classifier_pool_after: int("classifier_pool_after")?,
            dropout: float("dropout")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| invalid!("header line {l:?} is not key=value"))
        })
        .collect()
}
