//! On-disk dataset formats.
//!
//! * `cifar`: directory of CIFAR binary batches. Each record is one label
//!   byte (two for the 100-class layout, fine label last) followed by the
//!   planar RGB image. Train reads `data_batch_*.bin` (or `train.bin`), test
//!   reads `test_batch.bin` (or `test.bin`). Class names come from
//!   `batches.meta.txt` / `fine_label_names.txt` when present.
//! * `folder`: `root/<class>/*.png`, or `root/<split>/<class>/*.png` when a
//!   split directory exists. Classes are the sorted folder names.
//! * `archive`: a tar file holding `index.json` (`dataset_id`,
//!   `class_names`, `records: [{file, label, split}]`) and the PNG files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{to_u8, LabeledImageDataset, Split};
use crate::error::{Error, Result};
use crate::nn::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Cifar,
    Folder,
    Archive,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar" => Ok(DatasetFormat::Cifar),
            "folder" => Ok(DatasetFormat::Folder),
            "archive" => Ok(DatasetFormat::Archive),
            other => Err(Error::invalid(format!(
                "unknown dataset format `{other}` (expected cifar, folder or archive)"
            ))),
        }
    }
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    split: Split,
) -> Result<LabeledImageDataset> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    match format {
        DatasetFormat::Cifar => load_cifar(path, split),
        DatasetFormat::Folder => load_folder(path, split),
        DatasetFormat::Archive => load_archive(path, split),
    }
}

pub fn save_dataset(ds: &LabeledImageDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    ds.validate()?;
    match format {
        DatasetFormat::Cifar => save_cifar(ds, path),
        DatasetFormat::Folder => save_folder(ds, path),
        DatasetFormat::Archive => save_archive(ds, path),
    }
}

fn dir_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

const CIFAR_SHAPE: Shape3 = Shape3 { c: 3, h: 32, w: 32 };

fn read_lines(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    ))
}

fn load_cifar(path: &Path, split: Split) -> Result<LabeledImageDataset> {
    let (dir, files): (PathBuf, Vec<PathBuf>) = if path.is_file() {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            vec![path.to_path_buf()],
        )
    } else {
        let mut files = Vec::new();
        let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            let name = p
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let wanted = match split {
                Split::Train => {
                    (name.starts_with("data_batch_") && name.ends_with(".bin"))
                        || name == "train.bin"
                }
                Split::Test | Split::Probe => name == "test_batch.bin" || name == "test.bin",
            };
            if wanted {
                files.push(p);
            }
        }
        files.sort();
        (path.to_path_buf(), files)
    };
    if files.is_empty() {
        return Err(Error::schema(
            path.display().to_string(),
            format!("no CIFAR batch files for split {}", split.as_str()),
        ));
    }
    let (label_bytes, names) = if let Some(n) = read_lines(&dir.join("fine_label_names.txt"))? {
        (2, Some(n))
    } else if let Some(n) = read_lines(&dir.join("batches.meta.txt"))? {
        (1, Some(n))
    } else {
        let hundred = files.iter().any(|f| {
            let n = f.file_name().unwrap_or_default();
            n == "train.bin" || n == "test.bin"
        });
        if hundred {
            (2, None)
        } else {
            (1, None)
        }
    };
    let class_names = names.unwrap_or_else(|| {
        let m = if label_bytes == 2 { 100 } else { 10 };
        (0..m).map(|c| format!("class{c}")).collect()
    });
    let rec = label_bytes + CIFAR_SHAPE.len();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        if bytes.len() % rec != 0 {
            return Err(Error::schema(
                f.display().to_string(),
                format!(
                    "record {}: file length {} is not a multiple of {rec}",
                    bytes.len() / rec,
                    bytes.len()
                ),
            ));
        }
        for chunk in bytes.chunks_exact(rec) {
            labels.push(chunk[label_bytes - 1] as usize);
            images.push(
                chunk[label_bytes..]
                    .iter()
                    .map(|&b| b as f32 / 255.0)
                    .collect(),
            );
        }
    }
    LabeledImageDataset::new(
        dir_name(&dir),
        CIFAR_SHAPE,
        class_names,
        split,
        images,
        labels,
    )
}

fn save_cifar(ds: &LabeledImageDataset, path: &Path) -> Result<()> {
    if ds.shape != CIFAR_SHAPE {
        return Err(Error::ShapeMismatch {
            expected: CIFAR_SHAPE.to_string(),
            found: ds.shape.to_string(),
        });
    }
    if ds.class_count() > 256 {
        return Err(Error::invalid("CIFAR layout stores labels in one byte"));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(ds.len() * (1 + CIFAR_SHAPE.len()));
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        bytes.push(l as u8);
        bytes.extend(img.iter().map(|v| to_u8(*v)));
    }
    let file = match ds.split {
        Split::Train => "data_batch_1.bin",
        Split::Test | Split::Probe => "test_batch.bin",
    };
    let target = path.join(file);
    fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
    let meta = path.join("batches.meta.txt");
    fs::write(&meta, ds.class_names.join("\n") + "\n").map_err(|e| Error::io(&meta, e))
}

fn decode_png(bytes: &[u8], context: &str) -> Result<(Shape3, Vec<f32>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::schema(context, format!("unreadable PNG: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw): (usize, Vec<u8>) = match img.color().channel_count() {
        1 | 2 => (1, img.to_luma8().into_raw()),
        _ => (3, img.to_rgb8().into_raw()),
    };
    let mut planar = vec![0.0f32; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            planar[ch * h * w + p] = raw[p * c + ch] as f32 / 255.0;
        }
    }
    Ok((Shape3::new(c, h, w), planar))
}

fn encode_png(shape: Shape3, img: &[f32]) -> Result<Vec<u8>> {
    let (h, w) = (shape.h, shape.w);
    let mut interleaved = vec![0u8; shape.len()];
    for p in 0..h * w {
        for ch in 0..shape.c {
            interleaved[p * shape.c + ch] = to_u8(img[ch * h * w + p]);
        }
    }
    let color = match shape.c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::invalid(format!(
                "cannot store {c}-channel images as PNG"
            )))
        }
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &interleaved,
        w as u32,
        h as u32,
        color,
    )
    .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

fn push_checked(
    shape: &mut Option<Shape3>,
    images: &mut Vec<Vec<f32>>,
    (s, img): (Shape3, Vec<f32>),
    record: &str,
    context: &str,
) -> Result<()> {
    match shape {
        Some(prev) if *prev != s => {
            return Err(Error::schema(
                context,
                format!("record {record}: shape {s}, expected {prev}"),
            ));
        }
        None => *shape = Some(s),
        _ => {}
    }
    images.push(img);
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn load_folder(path: &Path, split: Split) -> Result<LabeledImageDataset> {
    let split_dir = path.join(split.as_str());
    let root = if split_dir.is_dir() {
        split_dir
    } else {
        path.to_path_buf()
    };
    let class_dirs: Vec<PathBuf> = sorted_entries(&root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::schema(
            root.display().to_string(),
            "no class folders",
        ));
    }
    let context = root.display().to_string();
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        for f in sorted_entries(dir)? {
            if f.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png"))
                != Some(true)
            {
                continue;
            }
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let record = f.display().to_string();
            push_checked(
                &mut shape,
                &mut images,
                decode_png(&bytes, &record)?,
                &record,
                &context,
            )?;
            labels.push(label);
        }
    }
    LabeledImageDataset::new(
        dir_name(path),
        shape.unwrap_or(Shape3::new(3, 0, 0)),
        class_names,
        split,
        images,
        labels,
    )
}

fn save_folder(ds: &LabeledImageDataset, path: &Path) -> Result<()> {
    let root = path.join(ds.split.as_str());
    let width = ds.class_count().to_string().len();
    let dirs: Vec<PathBuf> = ds
        .class_names
        .iter()
        .enumerate()
        .map(|(c, n)| root.join(format!("{c:0width$}_{}", sanitize(n))))
        .collect();
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (img, &l)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let f = dirs[l].join(format!("{i:06}.png"));
        fs::write(&f, encode_png(ds.shape, img)?).map_err(|e| Error::io(&f, e))?;
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveIndex {
    dataset_id: String,
    class_names: Vec<String>,
    records: Vec<ArchiveRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveRecord {
    file: String,
    label: usize,
    split: Split,
}

fn load_archive(path: &Path, split: Split) -> Result<LabeledImageDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(file);
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in archive.entries().map_err(|e| Error::io(path, e))? {
        let mut entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry
            .path()
            .map_err(|e| Error::io(path, e))?
            .to_string_lossy()
            .trim_start_matches("./")
            .to_string();
        let mut buf = Vec::new();
        entry
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        files.insert(name, buf);
    }
    let context = path.display().to_string();
    let index_bytes = files
        .get("index.json")
        .ok_or_else(|| Error::schema(&context, "archive has no index.json"))?;
    let index: ArchiveIndex = serde_json::from_slice(index_bytes)
        .map_err(|e| Error::schema(&context, format!("index.json: {e}")))?;
    let m = index.class_names.len();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape = None;
    for (i, r) in index.records.iter().enumerate() {
        if r.label >= m {
            return Err(Error::schema(
                &context,
                format!(
                    "record {i} ({}): label {} outside [0, {m})",
                    r.file, r.label
                ),
            ));
        }
        if r.split != split {
            continue;
        }
        let bytes = files.get(r.file.trim_start_matches("./")).ok_or_else(|| {
            Error::schema(&context, format!("record {i}: missing file {}", r.file))
        })?;
        let record = format!("{i} ({})", r.file);
        push_checked(
            &mut shape,
            &mut images,
            decode_png(bytes, &record)?,
            &record,
            &context,
        )?;
        labels.push(r.label);
    }
    LabeledImageDataset::new(
        index.dataset_id,
        shape.unwrap_or(Shape3::new(3, 0, 0)),
        index.class_names,
        split,
        images,
        labels,
    )
}

fn save_archive(ds: &LabeledImageDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut builder = tar::Builder::new(file);
    let mut records = Vec::with_capacity(ds.len());
    let mut append = |name: &str, data: &[u8]| -> Result<()> {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder
            .append_data(&mut header, name, data)
            .map_err(|e| Error::io(path, e))
    };
    for (i, (img, &l)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("images/{}_{i:06}.png", ds.split.as_str());
        append(&name, &encode_png(ds.shape, img)?)?;
        records.push(ArchiveRecord {
            file: name,
            label: l,
            split: ds.split,
        });
    }
    let index = ArchiveIndex {
        dataset_id: ds.dataset_id.clone(),
        class_names: ds.class_names.clone(),
        records,
    };
    append(
        "index.json",
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )?;
    builder.finish().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_dataset(
        shape: Shape3,
        classes: usize,
        per: usize,
        split: Split,
    ) -> LabeledImageDataset {
        let n = classes * per;
        LabeledImageDataset::new(
            "grid",
            shape,
            (0..classes).map(|c| format!("c{c}")).collect(),
            split,
            (0..n)
                .map(|i| {
                    (0..shape.len())
                        .map(|j| ((i * 7 + j * 13) % 256) as f32 / 255.0)
                        .collect()
                })
                .collect(),
            (0..n).map(|i| i % classes).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cifar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = grid_dataset(CIFAR_SHAPE, 10, 3, Split::Train);
        save_dataset(&ds, dir.path(), DatasetFormat::Cifar).unwrap();
        let back = load_dataset(dir.path(), DatasetFormat::Cifar, Split::Train).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.class_names, ds.class_names);
        assert!(load_dataset(dir.path(), DatasetFormat::Cifar, Split::Test).is_err());
    }

    #[test]
    fn cifar_label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[3073] = 10;
        fs::write(dir.path().join("data_batch_1.bin"), bytes).unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::Cifar, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
        assert!(err.to_string().contains("record 1"));
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = grid_dataset(Shape3::new(3, 5, 4), 3, 2, Split::Test);
        save_dataset(&ds, dir.path(), DatasetFormat::Folder).unwrap();
        let back = load_dataset(dir.path(), DatasetFormat::Folder, Split::Test).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.shape, ds.shape);
        assert_eq!(back.class_names, vec!["0_c0", "1_c1", "2_c2"]);
        let mut a: Vec<(usize, Vec<f32>)> =
            ds.labels.iter().copied().zip(ds.images.clone()).collect();
        let mut b: Vec<(usize, Vec<f32>)> = back
            .labels
            .iter()
            .copied()
            .zip(back.images.clone())
            .collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn archive_round_trip_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.tar");
        let ds = grid_dataset(Shape3::new(1, 4, 4), 10, 10, Split::Train);
        save_dataset(&ds, &p, DatasetFormat::Archive).unwrap();
        let back = load_dataset(&p, DatasetFormat::Archive, Split::Train).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.class_count(), 10);
        assert!(load_dataset(&p, DatasetFormat::Archive, Split::Test)
            .unwrap()
            .is_empty());

        let bad = dir.path().join("bad.tar");
        let mut builder = tar::Builder::new(fs::File::create(&bad).unwrap());
        let index = serde_json::json!({
            "dataset_id": "bad",
            "class_names": (0..10).map(|c| c.to_string()).collect::<Vec<_>>(),
            "records": [{"file": "a.png", "label": 10, "split": "train"}],
        })
        .to_string();
        let mut h = tar::Header::new_gnu();
        h.set_size(index.len() as u64);
        h.set_cksum();
        builder
            .append_data(&mut h, "index.json", index.as_bytes())
            .unwrap();
        builder.finish().unwrap();
        drop(builder);
        let err = load_dataset(&bad, DatasetFormat::Archive, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn missing_path_is_io_error() {
        let err = load_dataset(
            Path::new("/nonexistent/radmark"),
            DatasetFormat::Folder,
            Split::Train,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(DatasetFormat::parse("hdf5").is_err());
    }
}
