//! Synthetic world: a generator, a family of correlated encoders and a set of
//! identities with several noisy "photos" each.
//!
//! Encoder `k` computes `normalize(shared(x) + rho * private_k(x))`. The
//! shared trunk is the same network for every encoder and the private heads
//! are independently seeded with widths drawn from a small menu, so `rho`
//! alone controls how far an unseen encoder sits from the seen one. The sum is
//! realised exactly as a single wider [`Mlp`] (stacked first layer,
//! block-diagonal hidden layers, concatenated output layer).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::numerics::{Activation, Layer, Matrix, Mlp};
use crate::rng::{derive_seed, normal_vec, stream};

const GENERATOR_BIAS_SCALE: f64 = 0.1;
const ENCODER_BIAS_SCALE: f64 = 0.1;
/// Standard tanh gain for fan-in scaled initialization.
const TANH_GAIN: f64 = 5.0 / 3.0;
const PRIVATE_WIDTH_MENU: [usize; 4] = [16, 24, 32, 48];
pub const MANIFEST_VERSION: u32 = 1;

/// World shape. The defaults give the attacker more latent freedom than the
/// feature space pins down and a rugged generator, so that many latents match
/// the seen template while disagreeing elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub latent_dim: usize,
    pub image_dim: usize,
    pub feature_dim: usize,
    pub generator_depth: usize,
    pub generator_gain: f64,
    pub encoder_count: usize,
    pub encoder_hidden: usize,
    pub rho: f64,
    pub noise_scale: f64,
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub seen: usize,
    pub validation: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            image_dim: 32,
            feature_dim: 8,
            generator_depth: 5,
            generator_gain: 3.0,
            encoder_count: 7,
            encoder_hidden: 32,
            rho: 0.5,
            noise_scale: 0.05,
            n_ids: 50,
            samples_per_id: 4,
            seen: 0,
            validation: 1,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.latent_dim == 0 || self.image_dim == 0 || self.feature_dim == 0 {
            return bad("world dimensions must be positive".into());
        }
        if self.generator_depth == 0 || self.encoder_hidden == 0 {
            return bad("generator_depth and encoder_hidden must be positive".into());
        }
        if !(self.generator_gain > 0.0 && self.generator_gain.is_finite()) {
            return bad(format!("generator_gain must be positive, got {}", self.generator_gain));
        }
        if self.encoder_count < 3 {
            return bad(format!(
                "need at least 3 encoders (seen, validation, unseen), got {}",
                self.encoder_count
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        if self.n_ids < 2 || self.samples_per_id < 2 {
            return bad("need at least 2 identities with at least 2 samples each".into());
        }
        Roles::new(self.encoder_count, self.seen, self.validation).map(|_| ())
    }
}

/// Role assignment within an ensemble. Unseen encoders are everything that
/// is neither seen nor validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub seen: usize,
    pub validation: usize,
    pub unseen: Vec<usize>,
}

impl Roles {
    pub fn new(count: usize, seen: usize, validation: usize) -> Result<Self> {
        if seen >= count || validation >= count || seen == validation {
            return Err(Error::InvalidConfig(format!(
                "seen ({seen}) and validation ({validation}) must be distinct indices below {count}"
            )));
        }
        let unseen = (0..count).filter(|&k| k != seen && k != validation).collect();
        Ok(Self {
            seen,
            validation,
            unseen,
        })
    }

    pub fn role_of(&self, k: usize) -> Role {
        if k == self.seen {
            Role::Seen
        } else if k == self.validation {
            Role::Validation
        } else {
            Role::Unseen
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seen,
    Validation,
    Unseen,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Seen => "seen",
            Role::Validation => "validation",
            Role::Unseen => "unseen",
        })
    }
}

fn random_layer<R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    bias_scale: f64,
    act: Activation,
    tanh_gain: f64,
) -> Layer {
    let gain = match act {
        Activation::Tanh => tanh_gain,
        _ => 1.0,
    };
    let scale = gain / (fan_in as f64).sqrt();
    let w: Vec<f64> = normal_vec(rng, fan_in * fan_out)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let b = normal_vec(rng, fan_out)
        .into_iter()
        .map(|v| v * bias_scale)
        .collect();
    Layer::new(Matrix::new(fan_out, fan_in, w).expect("shape by construction"), b, act)
        .expect("shape by construction")
}

fn random_chain(seed: u64, dims: &[usize], bias_scale: f64, tanh_gain: f64, normalize: bool) -> Mlp {
    let mut rng = stream(seed, 0);
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(k, d)| {
            let act = if k == last {
                Activation::Identity
            } else {
                Activation::Tanh
            };
            random_layer(&mut rng, d[0], d[1], bias_scale, act, tanh_gain)
        })
        .collect();
    Mlp::new(layers, normalize).expect("dims chain by construction")
}

/// Generator with `depth` layers: tanh hidden layers of width `image_dim`,
/// identity output. Weights are normal with standard deviation
/// `gain/sqrt(fan_in)` (gain 5/3 before tanh, 1 otherwise).
pub fn make_generator(seed: u64, latent_dim: usize, image_dim: usize, depth: usize) -> Result<Mlp> {
    make_generator_with_gain(seed, latent_dim, image_dim, depth, TANH_GAIN)
}

/// [`make_generator`] with an explicit gain on the tanh layers; larger gains
/// give a more folded, multi-modal latent landscape.
pub fn make_generator_with_gain(
    seed: u64,
    latent_dim: usize,
    image_dim: usize,
    depth: usize,
    tanh_gain: f64,
) -> Result<Mlp> {
    if latent_dim == 0 || image_dim == 0 || depth == 0 {
        return Err(Error::InvalidConfig("generator dims and depth must be >= 1".into()));
    }
    let mut dims = vec![latent_dim];
    dims.extend(std::iter::repeat_n(image_dim, depth - 1));
    dims.push(image_dim);
    Ok(random_chain(seed, &dims, GENERATOR_BIAS_SCALE, tanh_gain, false))
}

/// Sums two equal-depth networks with the same input into one network:
/// `shared(x) + rho * private(x)`, optionally normalized.
fn compose_branches(shared: &Mlp, private: &Mlp, rho: f64, normalize: bool) -> Result<Mlp> {
    check_len("branch depth", shared.layers().len(), private.layers().len())?;
    check_len("branch input", shared.input_dim(), private.input_dim())?;
    check_len("branch output", shared.output_dim(), private.output_dim())?;
    let depth = shared.layers().len();
    let mut layers = Vec::with_capacity(depth);
    for (k, (s, p)) in shared.layers().iter().zip(private.layers()).enumerate() {
        if s.activation() != p.activation() {
            return Err(Error::InvalidNetwork("branch activations differ".into()));
        }
        let (sw, pw) = (s.weights(), p.weights());
        let (w, b) = if k + 1 == depth {
            // concatenate columns, scale the private head by rho
            let mut w = Matrix::zeros(sw.rows(), sw.cols() + pw.cols());
            for r in 0..sw.rows() {
                for c in 0..sw.cols() {
                    w.set(r, c, sw.get(r, c));
                }
                for c in 0..pw.cols() {
                    w.set(r, sw.cols() + c, rho * pw.get(r, c));
                }
            }
            let b = s.bias().iter().zip(p.bias()).map(|(a, c)| a + rho * c).collect();
            (w, b)
        } else {
            let in_cols = if k == 0 { sw.cols() } else { sw.cols() + pw.cols() };
            let p_offset = if k == 0 { 0 } else { sw.cols() };
            let mut w = Matrix::zeros(sw.rows() + pw.rows(), in_cols);
            for r in 0..sw.rows() {
                for c in 0..sw.cols() {
                    w.set(r, c, sw.get(r, c));
                }
            }
            for r in 0..pw.rows() {
                for c in 0..pw.cols() {
                    w.set(sw.rows() + r, p_offset + c, pw.get(r, c));
                }
            }
            let b = s.bias().iter().chain(p.bias()).copied().collect();
            (w, b)
        };
        layers.push(Layer::new(w, b, s.activation())?);
    }
    Mlp::new(layers, normalize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderEnsemble {
    encoders: Vec<Mlp>,
    roles: Roles,
    seed: u64,
    rho: f64,
    private_widths: Vec<usize>,
}

impl EncoderEnsemble {
    pub fn encoders(&self) -> &[Mlp] {
        &self.encoders
    }

    pub fn encoder(&self, k: usize) -> &Mlp {
        &self.encoders[k]
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn seen(&self) -> &Mlp {
        &self.encoders[self.roles.seen]
    }

    pub fn validation(&self) -> &Mlp {
        &self.encoders[self.roles.validation]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn private_widths(&self) -> &[usize] {
        &self.private_widths
    }

    pub fn with_roles(mut self, seen: usize, validation: usize) -> Result<Self> {
        self.roles = Roles::new(self.encoders.len(), seen, validation)?;
        Ok(self)
    }

    /// Swaps one encoder for another of the same shape contract. Used to
    /// check that attacks never depend on evaluation-only encoders.
    pub fn replace_encoder(&mut self, k: usize, net: Mlp) -> Result<()> {
        check_len("replacement encoder input", self.encoders[k].input_dim(), net.input_dim())?;
        check_len("replacement encoder output", self.encoders[k].output_dim(), net.output_dim())?;
        if !net.normalize_output() {
            return Err(Error::InvalidNetwork("encoders must normalize their output".into()));
        }
        self.encoders[k] = net;
        Ok(())
    }

    pub fn from_parts(encoders: Vec<Mlp>, roles: Roles, seed: u64, rho: f64) -> Result<Self> {
        if encoders.len() < 3 {
            return Err(Error::InvalidConfig("ensemble needs at least 3 encoders".into()));
        }
        let roles_check = Roles::new(encoders.len(), roles.seen, roles.validation)?;
        if roles_check != roles {
            return Err(Error::InvalidConfig("inconsistent role assignment".into()));
        }
        if encoders.iter().any(|e| !e.normalize_output()) {
            return Err(Error::InvalidNetwork("encoders must normalize their output".into()));
        }
        Ok(Self {
            encoders,
            roles,
            seed,
            rho,
            private_widths: Vec::new(),
        })
    }
}

/// Builds `count` encoders sharing one trunk; encoder 0 is seen, 1 is
/// validation, the rest are unseen (see [`EncoderEnsemble::with_roles`]).
pub fn make_encoder_ensemble(
    seed: u64,
    count: usize,
    image_dim: usize,
    feature_dim: usize,
    rho: f64,
) -> Result<EncoderEnsemble> {
    make_encoder_ensemble_with_width(seed, count, image_dim, feature_dim, rho, 32)
}

pub fn make_encoder_ensemble_with_width(
    seed: u64,
    count: usize,
    image_dim: usize,
    feature_dim: usize,
    rho: f64,
    shared_width: usize,
) -> Result<EncoderEnsemble> {
    if count < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 encoders (seen, validation, unseen), got {count}"
        )));
    }
    if image_dim == 0 || feature_dim == 0 || shared_width == 0 {
        return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
    }
    let shared = random_chain(
        derive_seed(seed, 0, 0),
        &[image_dim, shared_width, shared_width, feature_dim],
        ENCODER_BIAS_SCALE,
        TANH_GAIN,
        false,
    );
    let mut menu_rng = stream(seed, 1);
    let mut encoders = Vec::with_capacity(count);
    let mut private_widths = Vec::with_capacity(count);
    for k in 0..count {
        let width = PRIVATE_WIDTH_MENU[menu_rng.random_range(0..PRIVATE_WIDTH_MENU.len())];
        let private = random_chain(
            derive_seed(seed, 1, k as u64),
            &[image_dim, width, width, feature_dim],
            ENCODER_BIAS_SCALE,
            TANH_GAIN,
            false,
        );
        encoders.push(compose_branches(&shared, &private, rho, true)?);
        private_widths.push(width);
    }
    Ok(EncoderEnsemble {
        encoders,
        roles: Roles::new(count, 0, 1)?,
        seed,
        rho,
        private_widths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub z_real: Vec<f64>,
    /// `samples[0]` is the clean image `G(z_real)` the stored template was
    /// computed from; the rest are noisy captures of the same identity.
    pub samples: Vec<Vec<f64>>,
}

impl Identity {
    pub fn source(&self) -> &[f64] {
        &self.samples[0]
    }

    /// Samples usable for type-II verification (everything but the source).
    pub fn other_samples(&self) -> &[Vec<f64>] {
        &self.samples[1..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityWorld {
    pub generator: Mlp,
    pub identities: Vec<Identity>,
    pub noise_scale: f64,
}

/// Draws `n_ids` identities: `z_real ~ N(0, I)`, sample 0 is `G(z_real)` and
/// sample `j >= 1` is `G(z_real) + noise_scale * eta`, `eta ~ N(0, I)`.
pub fn sample_identities(
    generator: &Mlp,
    seed: u64,
    n_ids: usize,
    samples_per_id: usize,
    noise_scale: f64,
) -> Result<IdentityWorld> {
    if n_ids < 2 || samples_per_id < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 identities with at least 2 samples each".into(),
        ));
    }
    let identities = (0..n_ids)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let z_real = normal_vec(&mut rng, generator.input_dim());
            let clean = generator.forward(&z_real)?;
            let mut samples = Vec::with_capacity(samples_per_id);
            samples.push(clean.clone());
            for _ in 1..samples_per_id {
                let eta = normal_vec(&mut rng, clean.len());
                samples.push(clean.iter().zip(&eta).map(|(x, e)| x + noise_scale * e).collect());
            }
            Ok(Identity { z_real, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentityWorld {
        generator: generator.clone(),
        identities,
        noise_scale,
    })
}

/// Templates `v[identity][encoder] = E_encoder(G(z_real))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    features: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    pub fn get(&self, identity: usize, encoder: usize) -> &[f64] {
        &self.features[identity][encoder]
    }

    pub fn n_identities(&self) -> usize {
        self.features.len()
    }
}

pub fn ground_truth_targets(world: &IdentityWorld, ensemble: &EncoderEnsemble) -> Result<GroundTruth> {
    check_len(
        "encoder input vs generator output",
        world.generator.output_dim(),
        ensemble.encoder(0).input_dim(),
    )?;
    let features = world
        .identities
        .iter()
        .map(|id| {
            ensemble
                .encoders()
                .iter()
                .map(|e| e.forward(id.source()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth { features })
}

/// Everything the attacker may touch for one identity.
#[derive(Debug, Clone, Copy)]
pub struct AttackerView<'a> {
    pub generator: &'a Mlp,
    pub seen: &'a Mlp,
    pub validation: &'a Mlp,
    pub seen_target: &'a [f64],
}

/// A complete world: generator, encoders, identities and their templates.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub params: WorldParams,
    pub seed: u64,
    pub ensemble: EncoderEnsemble,
    pub identities: IdentityWorld,
    pub truth: GroundTruth,
}

impl World {
    pub fn build(params: &WorldParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let generator = make_generator_with_gain(
            derive_seed(seed, 10, 0),
            params.latent_dim,
            params.image_dim,
            params.generator_depth,
            params.generator_gain,
        )?;
        let ensemble = make_encoder_ensemble_with_width(
            derive_seed(seed, 11, 0),
            params.encoder_count,
            params.image_dim,
            params.feature_dim,
            params.rho,
            params.encoder_hidden,
        )?
        .with_roles(params.seen, params.validation)?;
        let identities = sample_identities(
            &generator,
            derive_seed(seed, 12, 0),
            params.n_ids,
            params.samples_per_id,
            params.noise_scale,
        )?;
        let truth = ground_truth_targets(&identities, &ensemble)?;
        Ok(Self {
            params: params.clone(),
            seed,
            ensemble,
            identities,
            truth,
        })
    }

    pub fn generator(&self) -> &Mlp {
        &self.identities.generator
    }

    pub fn n_identities(&self) -> usize {
        self.identities.identities.len()
    }

    pub fn attacker_view(&self, identity: usize) -> AttackerView<'_> {
        AttackerView {
            generator: self.generator(),
            seen: self.ensemble.seen(),
            validation: self.ensemble.validation(),
            seen_target: self.truth.get(identity, self.ensemble.roles().seen),
        }
    }

    /// SHA-256 over the serialized networks and identities.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.generator().to_json()?.as_bytes());
        for e in self.ensemble.encoders() {
            hasher.update(e.to_json()?.as_bytes());
        }
        hasher.update(serde_json::to_string(&self.identities.identities)?.as_bytes());
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Writes `generator.json`, `encoder_<k>.json` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.generator().save(&dir.join("generator.json"))?;
        for (k, e) in self.ensemble.encoders().iter().enumerate() {
            e.save(&dir.join(format!("encoder_{k}.json")))?;
        }
        let manifest = WorldManifest {
            version: MANIFEST_VERSION,
            seed: self.seed,
            params: self.params.clone(),
            rho: self.ensemble.rho(),
            roles: self.ensemble.roles().clone(),
            encoder_files: (0..self.ensemble.len())
                .map(|k| format!("encoder_{k}.json"))
                .collect(),
            generator_file: "generator.json".into(),
            identities: self.identities.identities.clone(),
            world_hash: self.hash()?,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: WorldManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                expected: MANIFEST_VERSION,
                found: manifest.version,
            });
        }
        let generator = Mlp::load(&dir.join(&manifest.generator_file))?;
        let encoders = manifest
            .encoder_files
            .iter()
            .map(|f| Mlp::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = EncoderEnsemble::from_parts(encoders, manifest.roles, manifest.seed, manifest.rho)?;
        let identities = IdentityWorld {
            generator,
            identities: manifest.identities,
            noise_scale: manifest.params.noise_scale,
        };
        let truth = ground_truth_targets(&identities, &ensemble)?;
        let world = Self {
            params: manifest.params,
            seed: manifest.seed,
            ensemble,
            identities,
            truth,
        };
        if world.hash()? != manifest.world_hash {
            return Err(Error::InvalidNetwork("world hash does not match manifest".into()));
        }
        Ok(world)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldManifest {
    version: u32,
    seed: u64,
    params: WorldParams,
    rho: f64,
    roles: Roles,
    generator_file: String,
    encoder_files: Vec<String>,
    identities: Vec<Identity>,
    world_hash: String,
}
