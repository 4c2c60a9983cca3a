//! On-disk dialogue features, validation, batching, and synthetic datasets.
//!
//! A dataset root holds a TOML `manifest` and one binary file per dialogue
//! under `dialogues/<id>.bin`. A dialogue file is a header followed by the
//! utterances in order, all little-endian:
//!
//! ```text
//! "HBAF" | version u16 | N u32 | D_a u32 | D_text u32
//! N x { audio f32[D_a] | context f32[D_text] | external f32[D_text]
//!       | internal f32[D_text] | purpose f32[D_text] | label u16 }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HbafError, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"HBAF";
pub const RECORD_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const DIALOGUE_DIR: &str = "dialogues";

pub const MELD_LABELS: [&str; 7] = [
    "anger", "joy", "sadness", "neutral", "disgust", "fear", "surprise",
];
pub const IEMOCAP_LABELS: [&str; 6] = [
    "happy",
    "sad",
    "neutral",
    "angry",
    "excited",
    "frustrated",
];

/// Ordered, duplicate-free emotion class names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EmotionLabelSet {
    names: Vec<String>,
}

impl EmotionLabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(HbafError::InvalidLabelSet(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(HbafError::InvalidLabelSet(format!("duplicate class {n}")));
            }
        }
        Ok(EmotionLabelSet { names })
    }

    pub fn meld() -> Self {
        Self::new(MELD_LABELS).unwrap()
    }

    pub fn iemocap() -> Self {
        Self::new(IEMOCAP_LABELS).unwrap()
    }

    /// `class0 .. class{c-1}`.
    pub fn generic(c: usize) -> Result<Self> {
        Self::new((0..c).map(|i| format!("class{i}")))
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "meld" => Ok(Self::meld()),
            "iemocap" => Ok(Self::iemocap()),
            _ => Err(HbafError::UnknownLabel(format!("built-in label set {name}"))),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| HbafError::UnknownLabel(name.to_string()))
    }
}

impl TryFrom<Vec<String>> for EmotionLabelSet {
    type Error = HbafError;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmotionLabelSet> for Vec<String> {
    fn from(l: EmotionLabelSet) -> Self {
        l.names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub audio: usize,
    pub text: usize,
}

/// Precomputed features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub audio: Vec<f32>,
    /// Utterance-level contextual text vector.
    pub context: Vec<f32>,
    pub external: Vec<f32>,
    pub internal: Vec<f32>,
    pub purpose: Vec<f32>,
    pub label: u16,
}

impl UtteranceFeatures {
    fn text_vectors(&self) -> [&Vec<f32>; 4] {
        [&self.context, &self.external, &self.internal, &self.purpose]
    }

    fn vectors_mut(&mut self) -> [&mut Vec<f32>; 5] {
        [
            &mut self.audio,
            &mut self.context,
            &mut self.external,
            &mut self.internal,
            &mut self.purpose,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub utterances: Vec<UtteranceFeatures>,
}

impl DialogueRecord {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label as usize).collect()
    }

    pub fn check(&self, dims: FeatureDims, num_classes: usize) -> Result<()> {
        let ctx = |what: &str| format!("dialogue {} {what}", self.dialogue_id);
        if self.utterances.is_empty() {
            return Err(HbafError::Shape(ctx("has no utterances")));
        }
        for (t, u) in self.utterances.iter().enumerate() {
            if u.audio.len() != dims.audio {
                return Err(HbafError::DimMismatch {
                    context: ctx(&format!("utterance {t} audio")),
                    expected: dims.audio,
                    found: u.audio.len(),
                });
            }
            for (kind, v) in ["context", "external", "internal", "purpose"]
                .iter()
                .zip(u.text_vectors())
            {
                if v.len() != dims.text {
                    return Err(HbafError::DimMismatch {
                        context: ctx(&format!("utterance {t} {kind}")),
                        expected: dims.text,
                        found: v.len(),
                    });
                }
            }
            let all = std::iter::once(&u.audio).chain(u.text_vectors());
            if all.flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
                return Err(HbafError::NonFinite(ctx(&format!("utterance {t} features"))));
            }
            if u.label as usize >= num_classes {
                return Err(HbafError::UnknownLabel(format!(
                    "{}: index {} with {num_classes} classes",
                    ctx(&format!("utterance {t}")),
                    u.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(HbafError::Config(format!("unknown split {s}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCount {
    pub dialogues: usize,
    pub utterances: usize,
}

/// Dataset description plus per-split counts computed at load time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureManifest {
    pub dataset_name: String,
    pub label_set: EmotionLabelSet,
    pub dims: FeatureDims,
    pub split: Splits,
    pub provenance: String,
    pub counts: BTreeMap<&'static str, SplitCount>,
}

impl FeatureManifest {
    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn count(&self, split: Split) -> SplitCount {
        self.counts.get(split.name()).copied().unwrap_or_default()
    }

    pub fn to_toml(&self) -> String {
        let file = ManifestFile {
            dataset_name: self.dataset_name.clone(),
            provenance: self.provenance.clone(),
            labels: Some(self.label_set.names().to_vec()),
            label_set: None,
            dims: self.dims,
            split: self.split.clone(),
        };
        toml::to_string(&file).expect("manifest serializes")
    }

    fn recount(&mut self, records: &BTreeMap<String, DialogueRecord>) {
        self.counts.clear();
        for split in [Split::Train, Split::Val, Split::Test] {
            let ids = self.split.ids(split);
            let utterances = ids.iter().filter_map(|id| records.get(id)).map(|r| r.len()).sum();
            self.counts.insert(
                split.name(),
                SplitCount {
                    dialogues: ids.len(),
                    utterances,
                },
            );
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    dataset_name: String,
    #[serde(default)]
    provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    dims: FeatureDims,
    #[serde(default)]
    split: Splits,
}

/// A validated manifest together with every dialogue it references.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: FeatureManifest,
    pub records: BTreeMap<String, DialogueRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DialogueRecord> {
        self.manifest
            .split
            .ids(split)
            .iter()
            .map(|id| &self.records[id])
            .collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<DialogueRecord> {
        self.split(split).into_iter().cloned().collect()
    }
}

fn manifest_path(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, path.to_path_buf())
    }
}

pub fn dialogue_path(root: &Path, id: &str) -> PathBuf {
    root.join(DIALOGUE_DIR).join(format!("{id}.bin"))
}

/// Reads and validates a manifest and every dialogue it references.
///
/// `path` may be the dataset root or the manifest file itself.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, file) = manifest_path(path);
    let text = std::fs::read_to_string(&file).map_err(|e| HbafError::io(&file, e))?;
    let raw: ManifestFile = toml::from_str(&text).map_err(|e| HbafError::Parse {
        path: file.clone(),
        message: e.to_string(),
    })?;
    let label_set = match (raw.labels, raw.label_set) {
        (Some(names), None) => EmotionLabelSet::new(names)?,
        (None, Some(name)) => EmotionLabelSet::builtin(&name)?,
        (Some(_), Some(_)) => {
            return Err(HbafError::Parse {
                path: file,
                message: "give either labels or label_set, not both".into(),
            })
        }
        (None, None) => {
            return Err(HbafError::Parse {
                path: file,
                message: "missing labels".into(),
            })
        }
    };
    if raw.dims.audio == 0 || raw.dims.text == 0 {
        return Err(HbafError::Parse {
            path: file,
            message: "dims must be positive".into(),
        });
    }
    let mut seen = HashSet::new();
    for id in raw.split.all() {
        if !seen.insert(id.as_str()) {
            return Err(HbafError::Parse {
                path: file,
                message: format!("dialogue {id} listed in more than one split entry"),
            });
        }
    }
    let mut records = BTreeMap::new();
    for id in raw.split.all() {
        let rec = read_record(&dialogue_path(&root, id), id)?;
        rec.check(raw.dims, label_set.len())?;
        records.insert(id.clone(), rec);
    }
    let mut manifest = FeatureManifest {
        dataset_name: raw.dataset_name,
        label_set,
        dims: raw.dims,
        split: raw.split,
        provenance: raw.provenance,
        counts: BTreeMap::new(),
    };
    manifest.recount(&records);
    Ok(Dataset {
        root,
        manifest,
        records,
    })
}

/// Validated manifest with per-split utterance counts.
pub fn load_manifest(path: &Path) -> Result<FeatureManifest> {
    load_dataset(path).map(|d| d.manifest)
}

pub fn encode_record(rec: &DialogueRecord) -> Vec<u8> {
    let (da, dt) = rec
        .utterances
        .first()
        .map(|u| (u.audio.len(), u.context.len()))
        .unwrap_or((0, 0));
    let mut buf = Vec::with_capacity(18 + rec.len() * (4 * (da + 4 * dt) + 2));
    buf.extend_from_slice(RECORD_MAGIC);
    buf.write_u16::<LittleEndian>(RECORD_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(rec.len() as u32).unwrap();
    buf.write_u32::<LittleEndian>(da as u32).unwrap();
    buf.write_u32::<LittleEndian>(dt as u32).unwrap();
    for u in &rec.utterances {
        for v in std::iter::once(&u.audio).chain(u.text_vectors()) {
            for x in v {
                buf.write_f32::<LittleEndian>(*x).unwrap();
            }
        }
        buf.write_u16::<LittleEndian>(u.label).unwrap();
    }
    buf
}

pub fn decode_record(bytes: &[u8], dialogue_id: &str, path: &Path) -> Result<DialogueRecord> {
    let bad = |m: &str| HbafError::Record {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != RECORD_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != RECORD_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut header = [0u32; 3];
    cur.read_u32_into::<LittleEndian>(&mut header)
        .map_err(|_| bad("truncated header"))?;
    let [n, da, dt] = header.map(|v| v as usize);
    let per_utt = 4 * (da + 4 * dt) + 2;
    if bytes.len() != 18 + n * per_utt {
        return Err(bad(&format!(
            "expected {} bytes for {n} utterances, found {}",
            18 + n * per_utt,
            bytes.len()
        )));
    }
    let read_vec = |len: usize, cur: &mut Cursor<&[u8]>| -> Result<Vec<f32>> {
        let mut v = vec![0f32; len];
        cur.read_f32_into::<LittleEndian>(&mut v)
            .map_err(|_| bad("truncated payload"))?;
        Ok(v)
    };
    let mut utterances = Vec::with_capacity(n);
    for _ in 0..n {
        let audio = read_vec(da, &mut cur)?;
        let context = read_vec(dt, &mut cur)?;
        let external = read_vec(dt, &mut cur)?;
        let internal = read_vec(dt, &mut cur)?;
        let purpose = read_vec(dt, &mut cur)?;
        let label = cur.read_u16::<LittleEndian>().map_err(|_| bad("truncated payload"))?;
        utterances.push(UtteranceFeatures {
            audio,
            context,
            external,
            internal,
            purpose,
            label,
        });
    }
    Ok(DialogueRecord {
        dialogue_id: dialogue_id.to_string(),
        utterances,
    })
}

pub fn read_record(path: &Path, dialogue_id: &str) -> Result<DialogueRecord> {
    let bytes = std::fs::read(path).map_err(|e| HbafError::io(path, e))?;
    decode_record(&bytes, dialogue_id, path)
}

pub fn write_record(path: &Path, rec: &DialogueRecord) -> Result<()> {
    std::fs::write(path, encode_record(rec)).map_err(|e| HbafError::io(path, e))
}

/// Hex sha256 over the manifest text and every encoded record in id order.
pub fn dataset_digest(manifest: &FeatureManifest, records: &[DialogueRecord]) -> String {
    let mut sorted: Vec<&DialogueRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    let mut h = Sha256::new();
    h.update(manifest.to_toml().as_bytes());
    for r in sorted {
        h.update(r.dialogue_id.as_bytes());
        h.update(encode_record(r));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest` and every record to `root`, creating directories as needed.
pub fn write_dataset(
    root: &Path,
    manifest: &FeatureManifest,
    records: &[DialogueRecord],
) -> Result<()> {
    let dir = root.join(DIALOGUE_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| HbafError::io(&dir, e))?;
    let file = root.join(MANIFEST_FILE);
    std::fs::write(&file, manifest.to_toml()).map_err(|e| HbafError::io(&file, e))?;
    for rec in records {
        write_record(&dialogue_path(root, &rec.dialogue_id), rec)?;
    }
    Ok(())
}

/// Where the label signal lives in a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Audio carries the class prototype; text carries label-independent content.
    AudioOnly,
    TextOnly,
    /// Each dialogue has one text code `k`; utterance audio carries code
    /// `(y - k) mod C`. Either modality alone is independent of the label,
    /// and no sum of per-modality scores can recover it.
    Agreement,
    /// Audio of utterance `(t + 1) mod N` carries the class of utterance `t`;
    /// only a model that looks across utterances can use it.
    LaggedAudio,
}

impl SignalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "audio_only" => Ok(SignalMode::AudioOnly),
            "text_only" => Ok(SignalMode::TextOnly),
            "agreement" => Ok(SignalMode::Agreement),
            "lagged_audio" => Ok(SignalMode::LaggedAudio),
            _ => Err(HbafError::Config(format!(
                "unknown signal mode {s}; expected audio_only, text_only, agreement or lagged_audio"
            ))),
        }
    }
}

/// Parameters of a synthetic dataset.
///
/// `n_dialogues` dialogues form the train split; `val_dialogues` and
/// `test_dialogues` more are drawn from the same distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_dialogues: usize,
    pub utterances_per_dialogue: usize,
    pub num_classes: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub signal_mode: SignalMode,
    pub noise_std: f64,
    pub seed: u64,
    pub val_dialogues: usize,
    pub test_dialogues: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(HbafError::Config(m.to_string()));
        if self.n_dialogues == 0 || self.utterances_per_dialogue == 0 {
            return err("dialogue and utterance counts must be positive");
        }
        if self.audio_dim == 0 || self.text_dim == 0 {
            return err("feature dims must be positive");
        }
        if self.num_classes < 2 {
            return err("need at least 2 classes");
        }
        if self.num_classes > u16::MAX as usize {
            return err("too many classes for a u16 label");
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return err("noise_std must be a finite nonnegative number");
        }
        Ok(())
    }
}

/// Prototype vectors with norm `1 + 3 * noise_std`, redrawn until every pair
/// is at least `max(4 * noise_std, 0.5)` apart.
fn prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize, noise_std: f64) -> Result<Vec<Vec<f64>>> {
    let radius = 1.0 + 3.0 * noise_std;
    let min_sep = (4.0 * noise_std).max(0.5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..1000 {
        let protos: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * radius / n).collect()
            })
            .collect();
        let ok = (0..count).all(|i| {
            (i + 1..count).all(|j| {
                let d2: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= min_sep
            })
        });
        if ok {
            return Ok(protos);
        }
    }
    Err(HbafError::Config(format!(
        "cannot place {count} separated prototypes in {dim} dimensions"
    )))
}

struct ModalityCodes {
    audio: Vec<Vec<f64>>,
    text: [Vec<Vec<f64>>; 4],
}

/// Deterministic synthetic dataset; see [`SignalMode`] for where the signal lives.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(FeatureManifest, Vec<DialogueRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let (audio_codes, text_codes) = (c, c);
    let codes = ModalityCodes {
        audio: prototypes(&mut rng, audio_codes, spec.audio_dim, spec.noise_std)?,
        text: [
            prototypes(&mut rng, text_codes, spec.text_dim, spec.noise_std)?,
            prototypes(&mut rng, text_codes, spec.text_dim, spec.noise_std)?,
            prototypes(&mut rng, text_codes, spec.text_dim, spec.noise_std)?,
            prototypes(&mut rng, text_codes, spec.text_dim, spec.noise_std)?,
        ],
    };
    let noise = Normal::new(0.0, spec.noise_std).unwrap();
    let total = spec.n_dialogues + spec.val_dialogues + spec.test_dialogues;
    let n = spec.utterances_per_dialogue;
    let mut records = Vec::with_capacity(total);
    for d in 0..total {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut utterances = Vec::with_capacity(n);
        for t in 0..n {
            let y = labels[t];
            let (a_code, t_code) = match spec.signal_mode {
                SignalMode::AudioOnly => (y, rng.random_range(0..text_codes)),
                SignalMode::TextOnly => (rng.random_range(0..audio_codes), y),
                SignalMode::Agreement => {
                    let k = rng.random_range(0..c);
                    ((y + c - k) % c, k)
                }
                SignalMode::LaggedAudio => (labels[(t + n - 1) % n], rng.random_range(0..text_codes)),
            };
            let mut draw = |proto: &[f64]| -> Vec<f32> {
                proto.iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect()
            };
            let audio = draw(&codes.audio[a_code]);
            let [context, external, internal, purpose] =
                [0, 1, 2, 3].map(|k| draw(&codes.text[k][t_code]));
            utterances.push(UtteranceFeatures {
                audio,
                context,
                external,
                internal,
                purpose,
                label: y as u16,
            });
        }
        records.push(DialogueRecord {
            dialogue_id: format!("d{d:05}"),
            utterances,
        });
    }
    let ids: Vec<String> = records.iter().map(|r| r.dialogue_id.clone()).collect();
    let (train, rest) = ids.split_at(spec.n_dialogues);
    let (val, test) = rest.split_at(spec.val_dialogues);
    let mut manifest = FeatureManifest {
        dataset_name: "synthetic".into(),
        label_set: EmotionLabelSet::generic(c)?,
        dims: FeatureDims {
            audio: spec.audio_dim,
            text: spec.text_dim,
        },
        split: Splits {
            train: train.to_vec(),
            val: val.to_vec(),
            test: test.to_vec(),
        },
        provenance: format!(
            "synthetic: mode={:?} noise_std={} seed={}",
            spec.signal_mode, spec.noise_std, spec.seed
        ),
        counts: BTreeMap::new(),
    };
    let by_id = records
        .iter()
        .map(|r| (r.dialogue_id.clone(), r.clone()))
        .collect();
    manifest.recount(&by_id);
    Ok((manifest, records))
}

/// Shuffled batches of whole dialogues, as indices into the input slice.
pub fn batch_dialogues<T>(records: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(HbafError::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-dimension mean and standard deviation of every feature kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// `(mean, std)` for audio, context, external, internal, purpose.
    kinds: [(Vec<f64>, Vec<f64>); 5],
}

impl FeatureStats {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a DialogueRecord>) -> Result<Self> {
        let utts: Vec<&UtteranceFeatures> = records.into_iter().flat_map(|r| &r.utterances).collect();
        if utts.is_empty() {
            return Err(HbafError::Config("cannot fit statistics on zero utterances".into()));
        }
        let pick = |u: &'a UtteranceFeatures, k: usize| -> &'a Vec<f32> {
            match k {
                0 => &u.audio,
                _ => u.text_vectors()[k - 1],
            }
        };
        let kinds = [0, 1, 2, 3, 4].map(|k| {
            let dim = pick(utts[0], k).len();
            let count = utts.len() as f64;
            let mut mean = vec![0.0; dim];
            for u in &utts {
                for (m, x) in mean.iter_mut().zip(pick(u, k)) {
                    *m += *x as f64 / count;
                }
            }
            let mut std = vec![0.0; dim];
            for u in &utts {
                for ((s, x), m) in std.iter_mut().zip(pick(u, k)).zip(&mean) {
                    *s += (*x as f64 - m).powi(2) / count;
                }
            }
            std.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
            (mean, std)
        });
        Ok(FeatureStats { kinds })
    }

    pub fn apply(&self, records: &mut [DialogueRecord]) {
        for u in records.iter_mut().flat_map(|r| r.utterances.iter_mut()) {
            for (k, v) in u.vectors_mut().into_iter().enumerate() {
                let (mean, std) = &self.kinds[k];
                for ((x, m), s) in v.iter_mut().zip(mean).zip(std) {
                    *x = ((*x as f64 - m) / s) as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: SignalMode) -> SynthSpec {
        SynthSpec {
            n_dialogues: 5,
            utterances_per_dialogue: 4,
            num_classes: 4,
            audio_dim: 6,
            text_dim: 5,
            signal_mode: mode,
            noise_std: 0.1,
            seed: 3,
            val_dialogues: 2,
            test_dialogues: 1,
        }
    }

    #[test]
    fn label_sets_validate() {
        assert_eq!(EmotionLabelSet::meld().len(), 7);
        assert_eq!(EmotionLabelSet::iemocap().len(), 6);
        assert!(EmotionLabelSet::new(["a"]).is_err());
        assert!(EmotionLabelSet::new(["a", "b", "a"]).is_err());
        assert_eq!(EmotionLabelSet::meld().index_of("fear").unwrap(), 5);
        assert!(matches!(
            EmotionLabelSet::meld().index_of("bored"),
            Err(HbafError::UnknownLabel(_))
        ));
    }

    #[test]
    fn record_codec_round_trips() {
        let (_, records) = generate_synthetic(&spec(SignalMode::Agreement)).unwrap();
        let bytes = encode_record(&records[0]);
        let back = decode_record(&bytes, "d00000", Path::new("x")).unwrap();
        assert_eq!(back, records[0]);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let (_, records) = generate_synthetic(&spec(SignalMode::AudioOnly)).unwrap();
        let bytes = encode_record(&records[0]);
        assert!(decode_record(&bytes[..bytes.len() - 1], "x", Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_record(&bad, "x", Path::new("x")).is_err());
    }

    #[test]
    fn synthetic_splits_and_counts() {
        let (m, records) = generate_synthetic(&spec(SignalMode::TextOnly)).unwrap();
        assert_eq!(records.len(), 8);
        assert_eq!(m.count(Split::Train).utterances, 20);
        assert_eq!(m.count(Split::Val).dialogues, 2);
        assert_eq!(m.count(Split::Test).dialogues, 1);
        for r in &records {
            r.check(m.dims, 4).unwrap();
        }
    }

    #[test]
    fn agreement_label_is_modular_sum() {
        let mut s = spec(SignalMode::Agreement);
        s.noise_std = 0.0;
        s.n_dialogues = 40;
        let (_, records) = generate_synthetic(&s).unwrap();
        let utts: Vec<_> = records.iter().flat_map(|r| &r.utterances).collect();
        let index = |protos: Vec<&Vec<f32>>| {
            let mut seen: Vec<&Vec<f32>> = Vec::new();
            protos
                .into_iter()
                .map(|v| match seen.iter().position(|p| *p == v) {
                    Some(i) => i,
                    None => {
                        seen.push(v);
                        seen.len() - 1
                    }
                })
                .collect::<Vec<_>>()
        };
        let a = index(utts.iter().map(|u| &u.audio).collect());
        let t = index(utts.iter().map(|u| &u.context).collect());
        assert_eq!(a.iter().max(), Some(&3));
        assert_eq!(t.iter().max(), Some(&3));
        // Code indices are arbitrary, so recover the shift table from the
        // first occurrence of each pair and demand it is a Latin square.
        let mut table = [[None; 4]; 4];
        for (k, u) in utts.iter().enumerate() {
            let cell = &mut table[a[k]][t[k]];
            match cell {
                Some(y) => assert_eq!(*y, u.label),
                None => *cell = Some(u.label),
            }
        }
        for i in 0..4 {
            let row: std::collections::BTreeSet<_> = table[i].iter().flatten().collect();
            let col: std::collections::BTreeSet<_> = table.iter().filter_map(|r| r[i]).collect();
            assert_eq!(row.len(), table[i].iter().flatten().count());
            assert_eq!(col.len(), table.iter().filter(|r| r[i].is_some()).count());
        }
    }

    #[test]
    fn lagged_audio_carries_previous_label() {
        let mut s = spec(SignalMode::LaggedAudio);
        s.noise_std = 0.0;
        let (_, records) = generate_synthetic(&s).unwrap();
        // identical audio vectors imply identical labels one step back
        for r in &records {
            for t in 0..r.len() {
                for u in 0..r.len() {
                    let same = r.utterances[t].audio == r.utterances[u].audio;
                    let prev = |i: usize| r.utterances[(i + r.len() - 1) % r.len()].label;
                    assert_eq!(same, prev(t) == prev(u));
                }
            }
        }
    }

    #[test]
    fn batch_sizes_follow_counting() {
        let b = batch_dialogues(&[(); 5], 2, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(batch_dialogues(&[(); 5], 9, 1).unwrap().len(), 1);
        assert!(batch_dialogues(&[(); 5], 0, 1).is_err());
    }

    #[test]
    fn standardization_centers_training_features() {
        let (_, mut records) = generate_synthetic(&spec(SignalMode::Agreement)).unwrap();
        let stats = FeatureStats::fit(&records).unwrap();
        stats.apply(&mut records);
        let n = records.iter().map(|r| r.len()).sum::<usize>() as f64;
        let mean0: f64 = records
            .iter()
            .flat_map(|r| &r.utterances)
            .map(|u| u.audio[0] as f64)
            .sum::<f64>()
            / n;
        assert!(mean0.abs() < 1e-5);
    }
}
