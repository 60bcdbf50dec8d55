//! Benchmark archives on disk.
//!
//! ```text
//! <dir>/manifest.txt              key = value lines, see below
//! <dir>/source/images/NNNN.ppm    labeled source images (P6)
//! <dir>/source/labels/NNNN.pgm    source labels, dense known ids, 255 = ignore (P5)
//! <dir>/target/images/NNNN.ppm    unlabeled target images (P6)
//! <dir>/eval/labels/NNNN.pgm      held-out target labels, unknown = C (P5)
//! ```
//!
//! The manifest records `format`, image size, the class space (`num_known`,
//! `unknown_id`, `ignore_id`), class names, private and thing ids, the scene
//! seed and split counts. The checksum is SHA-256 over every file in path
//! order, each contributing its relative path, a zero byte, its length as a
//! little-endian u64, and its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use busseg_core::dataset::{Benchmark, Sample};
use busseg_core::{ClassSpace, ImageTensor, IGNORE_ID};
use sha2::{Digest, Sha256};

use crate::pnm::{self, PnmError};

pub const FORMAT: &str = "busseg-archive 1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PnmError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0} exists and is not a benchmark archive; refusing to overwrite")]
    Occupied(PathBuf),
    #[error("archive contents: {0}")]
    Contents(#[from] busseg_core::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Archive files as relative path to bytes, in path order.
pub type FileSet = BTreeMap<String, Vec<u8>>;

fn file_name(dir: &str, index: usize, ext: &str) -> String {
    format!("{dir}/{index:04}.{ext}")
}

fn join(items: impl IntoIterator<Item = impl ToString>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn manifest(bench: &Benchmark) -> String {
    let (h, w) = bench.target_images.first().map_or((0, 0), ImageTensor::dims);
    let cs = &bench.class_space;
    let rows = [
        ("format", FORMAT.to_string()),
        ("height", h.to_string()),
        ("width", w.to_string()),
        ("num_known", cs.num_known().to_string()),
        ("unknown_id", cs.unknown_id().to_string()),
        ("ignore_id", cs.ignore_id().to_string()),
        ("known_names", bench.known_names.join(",")),
        ("private_names", bench.private_names.join(",")),
        ("private_ids", join(&bench.private_ids)),
        ("thing_class_ids", join(&bench.thing_class_ids)),
        ("seed", bench.seed.to_string()),
        ("source_count", bench.source.len().to_string()),
        ("target_count", bench.target_images.len().to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Serializes a benchmark to its archive files.
pub fn encode(bench: &Benchmark) -> FileSet {
    let mut files = FileSet::new();
    files.insert(MANIFEST.into(), manifest(bench).into_bytes());
    for (i, s) in bench.source.iter().enumerate() {
        files.insert(file_name("source/images", i, "ppm"), pnm::encode_ppm(&s.image));
        files.insert(file_name("source/labels", i, "pgm"), pnm::encode_pgm(&s.label));
    }
    for (i, img) in bench.target_images.iter().enumerate() {
        files.insert(file_name("target/images", i, "ppm"), pnm::encode_ppm(img));
    }
    for (i, lab) in bench.target_eval_labels.iter().enumerate() {
        files.insert(file_name("eval/labels", i, "pgm"), pnm::encode_pgm(lab));
    }
    files
}

pub fn checksum(files: &FileSet) -> String {
    let mut hasher = Sha256::new();
    for (path, bytes) in files {
        hasher.update(path.as_bytes());
        hasher.update([0]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes the archive into `dir` and returns its checksum.
///
/// An existing archive in `dir` is replaced; any other non-empty directory is
/// left alone and reported as occupied.
pub fn write(bench: &Benchmark, dir: &Path) -> Result<String, ArchiveError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        let empty = entries.next().is_none();
        if !empty && !dir.join(MANIFEST).is_file() {
            return Err(ArchiveError::Occupied(dir.to_path_buf()));
        }
        for sub in ["source", "target", "eval"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    let files = encode(bench);
    for sub in ["source/images", "source/labels", "target/images", "eval/labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for (rel, bytes) in &files {
        let p = dir.join(rel);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    Ok(checksum(&files))
}

/// Parsed manifest fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub class_space: ClassSpace,
    pub known_names: Vec<String>,
    pub private_names: Vec<String>,
    pub private_ids: Vec<u8>,
    pub thing_class_ids: Vec<u8>,
    pub seed: u64,
    pub source_count: usize,
    pub target_count: usize,
}

fn split_list(v: &str) -> Vec<String> {
    if v.is_empty() {
        Vec::new()
    } else {
        v.split(',').map(str::to_string).collect()
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ArchiveError> {
        let bad = |m: String| ArchiveError::Manifest(m);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ArchiveError> {
            v.parse()
                .map_err(|_| ArchiveError::Manifest(format!("bad value `{v}` for `{k}`")))
        }
        let ids = |k: &str| -> Result<Vec<u8>, ArchiveError> {
            split_list(get(k)?).iter().map(|v| num(k, v)).collect()
        };
        if get("format")? != FORMAT {
            return Err(bad(format!("unsupported format, expected `{FORMAT}`")));
        }
        let num_known: usize = num("num_known", get("num_known")?)?;
        let class_space = ClassSpace::new(num_known)?;
        if num::<u8>("unknown_id", get("unknown_id")?)? != class_space.unknown_id()
            || num::<u8>("ignore_id", get("ignore_id")?)? != IGNORE_ID
        {
            return Err(bad("unknown_id/ignore_id disagree with num_known".into()));
        }
        let known_names = split_list(get("known_names")?);
        if known_names.len() != num_known {
            return Err(bad("known_names length differs from num_known".into()));
        }
        Ok(Self {
            height: num("height", get("height")?)?,
            width: num("width", get("width")?)?,
            class_space,
            known_names,
            private_names: split_list(get("private_names")?),
            private_ids: ids("private_ids")?,
            thing_class_ids: ids("thing_class_ids")?,
            seed: num("seed", get("seed")?)?,
            source_count: num("source_count", get("source_count")?)?,
            target_count: num("target_count", get("target_count")?)?,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ArchiveError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    Manifest::parse(&text)
}

fn read_file<T>(
    dir: &Path,
    rel: &str,
    decode: fn(&[u8]) -> Result<T, PnmError>,
) -> Result<T, ArchiveError> {
    let p = dir.join(rel);
    let bytes = fs::read(&p).map_err(io_err(&p))?;
    decode(&bytes).map_err(|source| ArchiveError::Image { path: p, source })
}

/// Which parts of an archive to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Source samples and unlabeled target images.
    Training,
    /// Target images with their held-out labels.
    Evaluation,
}

/// Loads an archive. Training loads leave `target_eval_labels` empty and
/// evaluation loads leave `source` empty, so held-out labels never reach a
/// trainer.
pub fn read(dir: &Path, split: Split) -> Result<Benchmark, ArchiveError> {
    let m = read_manifest(dir)?;
    let cs = m.class_space;
    let dims = (m.height, m.width);
    let check_image = |img: &ImageTensor, rel: &str| {
        if img.dims() == dims {
            Ok(())
        } else {
            Err(ArchiveError::Manifest(format!("{rel} has the wrong size")))
        }
    };
    let mut source = Vec::new();
    if split == Split::Training {
        for i in 0..m.source_count {
            let rel = file_name("source/images", i, "ppm");
            let image = read_file(dir, &rel, pnm::decode_ppm)?;
            check_image(&image, &rel)?;
            let label = read_file(dir, &file_name("source/labels", i, "pgm"), pnm::decode_pgm)?;
            if label.data().iter().any(|&l| !cs.is_known(l) && l != IGNORE_ID) {
                return Err(ArchiveError::Manifest(format!("source label {i} holds non-known classes")));
            }
            source.push(Sample { image, label });
        }
    }
    let mut target_images = Vec::with_capacity(m.target_count);
    for i in 0..m.target_count {
        let rel = file_name("target/images", i, "ppm");
        let image = read_file(dir, &rel, pnm::decode_ppm)?;
        check_image(&image, &rel)?;
        target_images.push(image);
    }
    let mut target_eval_labels = Vec::new();
    if split == Split::Evaluation {
        for i in 0..m.target_count {
            let label = read_file(dir, &file_name("eval/labels", i, "pgm"), pnm::decode_pgm)?;
            label.validate(&cs)?;
            target_eval_labels.push(label);
        }
    }
    Ok(Benchmark {
        class_space: cs,
        known_names: m.known_names,
        private_names: m.private_names,
        private_ids: m.private_ids,
        thing_class_ids: m.thing_class_ids,
        source,
        target_images,
        target_eval_labels,
        seed: m.seed,
    })
}
