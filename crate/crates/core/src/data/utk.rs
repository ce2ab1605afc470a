use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rayon::prelude::*;

use super::SampleRecord;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const UTK_RACES: usize = 5;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Parses `[age]_[gender]_[race]_[tag].ext` into `(age, gender, race)`.
pub fn parse_utk_filename(name: &str) -> Result<(u32, usize, usize)> {
    let fail = |reason: &str| Error::Parse {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let parts: Vec<&str> = name.splitn(4, '_').collect();
    if parts.len() < 4 || parts[3].is_empty() {
        return Err(fail("expected age_gender_race_tag"));
    }
    let age = parts[0].parse().map_err(|_| fail("age is not an integer"))?;
    let gender: usize = parts[1].parse().map_err(|_| fail("gender is not an integer"))?;
    let race: usize = parts[2].parse().map_err(|_| fail("race is not an integer"))?;
    if gender > 1 {
        return Err(fail("gender must be 0 or 1"));
    }
    if race >= UTK_RACES {
        return Err(fail("race must lie in 0..5"));
    }
    Ok((age, gender, race))
}

/// Records that loaded, plus one `(file name, message)` per file that did not.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<SampleRecord>,
    pub errors: Vec<(String, String)>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn to_chw(img: DynamicImage, size: u32, channels: usize) -> Tensor {
    let s = size as usize;
    let data: Vec<f32> = if channels == 1 {
        let g = image::imageops::resize(&img.to_luma8(), size, size, FilterType::Triangle);
        g.into_raw().into_iter().map(|p| p as f32 / 127.5 - 1.0).collect()
    } else {
        let rgb = image::imageops::resize(&img.to_rgb8(), size, size, FilterType::Triangle);
        let raw = rgb.into_raw();
        let mut out = vec![0.0; 3 * s * s];
        for (i, px) in raw.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * s * s + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        out
    };
    Tensor::new(vec![channels, s, s], data).expect("sized by construction")
}

fn load_one(path: &Path, size: u32, channels: usize) -> Result<SampleRecord> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let (age, gender, race) = parse_utk_filename(&name)?;
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(SampleRecord {
        image: to_chw(img, size, channels),
        gender,
        race,
        age: Some(age),
        source_id: name,
    })
}

/// Loads every PNG/JPEG in `dir` (not recursive), resized bilinearly to
/// `target_size`² with `channels` ∈ {1, 3} and scaled to `[-1, 1]`. Records are
/// ordered by file name; files that fail to parse or decode are reported.
pub fn load_dataset(dir: impl AsRef<Path>, target_size: usize, channels: usize) -> Result<LoadReport> {
    ensure!(target_size > 0, "target_size must be positive");
    ensure!(channels == 1 || channels == 3, "channels must be 1 or 3, got {channels}");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && is_image(p));
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let results: Vec<(String, Result<SampleRecord>)> = paths
        .par_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, load_one(p, target_size as u32, channels))
        })
        .collect();
    let mut report = LoadReport::default();
    for (name, r) in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(e) => report.errors.push((name, e.to_string())),
        }
    }
    Ok(report)
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes records as 8-bit PNGs named `age_gender_race_sourceid.png`.
pub fn write_utk_images(records: &[SampleRecord], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.as_ref())?;
    let mut paths = Vec::with_capacity(records.len());
    for r in records {
        let shape = r.image.shape();
        ensure!(
            shape.len() == 3 && (shape[0] == 1 || shape[0] == 3),
            "cannot write image of shape {shape:?}"
        );
        let (h, w) = (shape[1] as u32, shape[2] as u32);
        let path = dir
            .as_ref()
            .join(format!("{}_{}_{}_{}.png", r.age.unwrap_or(0), r.gender, r.race, r.source_id));
        let d = r.image.data();
        let saved = if shape[0] == 1 {
            GrayImage::from_raw(w, h, d.iter().map(|&v| to_byte(v)).collect())
                .expect("sized by construction")
                .save(&path)
        } else {
            let plane = (h * w) as usize;
            let raw = (0..plane).flat_map(|i| (0..3).map(move |c| to_byte(d[c * plane + i]))).collect();
            RgbImage::from_raw(w, h, raw).expect("sized by construction").save(&path)
        };
        saved.map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filename_examples() {
        assert_eq!(parse_utk_filename("25_0_1_20170116.jpg").unwrap(), (25, 0, 1));
        assert_eq!(parse_utk_filename("1_1_4_x.jpg").unwrap(), (1, 1, 4));
        assert_eq!(parse_utk_filename("26_1_3_20170117.jpg.chip.jpg").unwrap(), (26, 1, 3));
        for bad in ["25_0.jpg", "25_2_1_x.jpg", "25_0_5_x.jpg", "a_0_1_x.jpg", "25_0_1_"] {
            match parse_utk_filename(bad) {
                Err(Error::Parse { name, .. }) => assert_eq!(name, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn white_image_normalizes_to_one_and_bad_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            let img = RgbImage::from_pixel(20, 12, image::Rgb([255, 255, 255]));
            img.save(dir.path().join(format!("{}_{}_{}_{i}.png", 20 + i, i % 2, i % 5))).unwrap();
        }
        std::fs::write(dir.path().join("3_0_0_broken.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("bad.png"), b"").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let report = load_dataset(dir.path(), 8, 3).unwrap();
        assert_eq!(report.records.len(), 10);
        assert_eq!(report.errors.len(), 2);
        for r in &report.records {
            assert_eq!(r.image.shape(), &[3, 8, 8]);
            assert!(r.image.data().iter().all(|&v| v == 1.0));
        }
        let ids: Vec<&str> = report.records.iter().map(|r| r.source_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        let again = load_dataset(dir.path(), 8, 3).unwrap();
        assert_eq!(super::super::manifest_hash(&report.records), super::super::manifest_hash(&again.records));
    }
}
