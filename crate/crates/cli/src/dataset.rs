//! On-disk pairs and CSV helpers.
//!
//! A dataset is a directory of pair directories (`pair_0000`, ...), each
//! holding `source.pgm`, `target.pgm`, `mask.pgm`, `keypoints.csv` (source
//! keypoints, `id,x_px,y_px`) and `transform.csv` (`scale,tx,ty,cx,cy`).
//! Target keypoints are the source keypoints mapped by the transform.

use std::fs;
use std::path::{Path, PathBuf};

use chm_core::eval::sig9;
use chm_core::image::GrayImage;
use chm_core::learn::{Similarity, TrainPair};
use chm_core::ChmError;

use crate::error::CliError;

pub fn pair_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("pair_{i:04}"))
}

/// Writes `rows` under `header`; every field is already formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Numeric rows of a headed CSV, checking the header.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>, CliError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if got != header {
        return Err(ChmError::Parse(format!("{}: header {:?}, expected {:?}", path.display(), got, header)).into());
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| ChmError::Parse(format!("{}: bad number `{f}`", path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_keypoints(path: &Path, kps: &[(f64, f64)]) -> Result<(), CliError> {
    write_csv(
        path,
        &["id", "x_px", "y_px"],
        kps.iter().enumerate().map(|(i, k)| vec![i.to_string(), sig9(k.0), sig9(k.1)]),
    )
}

pub fn read_keypoints(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let rows = read_csv(path, &["id", "x_px", "y_px"])?;
    Ok(rows.into_iter().map(|r| (r[1], r[2])).collect())
}

pub fn write_pair(dir: &Path, pair: &TrainPair) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    pair.source.write_pgm(dir.join("source.pgm"))?;
    pair.target.write_pgm(dir.join("target.pgm"))?;
    pair.mask.write_pgm(dir.join("mask.pgm"))?;
    let src: Vec<(f64, f64)> = pair.keypoints.iter().map(|k| k.0).collect();
    write_keypoints(&dir.join("keypoints.csv"), &src)?;
    let t = pair.transform;
    write_csv(
        &dir.join("transform.csv"),
        &["scale", "tx", "ty", "cx", "cy"],
        [vec![sig9(t.scale), sig9(t.tx), sig9(t.ty), sig9(t.cx), sig9(t.cy)]],
    )
}

pub fn read_pair(dir: &Path) -> Result<TrainPair, CliError> {
    let source = GrayImage::read_pgm(dir.join("source.pgm"))?;
    let target = GrayImage::read_pgm(dir.join("target.pgm"))?;
    let mask = GrayImage::read_pgm(dir.join("mask.pgm"))?;
    let src = read_keypoints(&dir.join("keypoints.csv"))?;
    let rows = read_csv(&dir.join("transform.csv"), &["scale", "tx", "ty", "cx", "cy"])?;
    let r = rows.first().ok_or_else(|| ChmError::Parse(format!("{}: no transform row", dir.display())))?;
    let transform = Similarity { scale: r[0], tx: r[1], ty: r[2], cx: r[3], cy: r[4] };
    let keypoints = src.iter().map(|&k| (k, transform.apply(k))).collect();
    Ok(TrainPair { source, target, keypoints, mask, transform })
}

/// All pair directories under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<TrainPair>, CliError> {
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} does not exist", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("source.pgm").exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_pair(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chm_core::learn::{make_synthetic_pair, SynthConfig};

    #[test]
    fn pair_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = make_synthetic_pair(4, &SynthConfig { image_size: 32, ..SynthConfig::default() }).unwrap();
        write_pair(dir.path(), &pair).unwrap();
        let back = read_pair(dir.path()).unwrap();
        assert_eq!(back.mask, pair.mask);
        assert_eq!(back.keypoints.len(), pair.keypoints.len());
        for (a, b) in back.keypoints.iter().zip(&pair.keypoints) {
            assert!((a.0 .0 - b.0 .0).abs() < 1e-6 && (a.1 .1 - b.1 .1).abs() < 1e-5);
        }
        // 8-bit storage.
        assert!(back.source.pixels.iter().zip(&pair.source.pixels).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.csv");
        fs::write(&p, "id,x,y\n0,1,2\n").unwrap();
        assert!(read_keypoints(&p).is_err());
        fs::write(&p, "id,x_px,y_px\n0,1,two\n").unwrap();
        assert!(read_keypoints(&p).is_err());
    }
}
