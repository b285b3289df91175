//! Volume and projection files: a short text header ending in `end`, then raw
//! little-endian `f32` values (volumes slice-major, projections view-major).
//!
//! ```text
//! DPVOL 1              DPPROJ 1
//! dims 64 64 64        dims 360 128 128
//! spacing 1            geometry_hash <hex>
//! origin -31.5 ...     geometry <json>
//! dtype f32            dtype f32
//! byteorder little     byteorder little
//! end                  end
//! ```

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::ProjectionSet;
use crate::volume::Volume;

const VOLUME_MAGIC: &str = "DPVOL 1";
const PROJ_MAGIC: &str = "DPPROJ 1";

fn push_f32(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn volume_to_bytes(vol: &Volume) -> Vec<u8> {
    let [d, h, w] = vol.shape;
    let [oz, oy, ox] = vol.origin;
    let mut out = format!(
        "{VOLUME_MAGIC}\ndims {d} {h} {w}\nspacing {:?}\norigin {oz:?} {oy:?} {ox:?}\ndtype f32\nbyteorder little\nend\n",
        vol.spacing
    )
    .into_bytes();
    push_f32(&mut out, &vol.data);
    out
}

pub fn projections_to_bytes(proj: &ProjectionSet) -> Vec<u8> {
    let g = &proj.geometry;
    let json = serde_json::to_string(g).expect("geometry serializes");
    let mut out = format!(
        "{PROJ_MAGIC}\ndims {} {} {}\ngeometry_hash {}\ngeometry {json}\ndtype f32\nbyteorder little\nend\n",
        g.n_views(),
        g.detector_rows,
        g.detector_cols,
        g.hash()
    )
    .into_bytes();
    push_f32(&mut out, &proj.data);
    out
}

/// Header key/value pairs in order, with the reader left at the payload.
fn read_header<R: BufRead>(path: &Path, r: &mut R, magic: &str) -> Result<Vec<(String, String)>> {
    let mut line = String::new();
    let mut fields = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "header ends before `end`"));
        }
        let l = line.trim_end_matches('\n');
        if first {
            if l != magic {
                return Err(Error::format(path, format!("expected `{magic}` header")));
            }
            first = false;
            continue;
        }
        if l == "end" {
            return Ok(fields);
        }
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        fields.push((k.to_string(), v.to_string()));
    }
}

fn field<'a>(path: &Path, fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(path, format!("missing `{key}` header field")))
}

fn parse_list<T: std::str::FromStr>(path: &Path, key: &str, text: &str, n: usize) -> Result<Vec<T>> {
    let vals: Vec<T> = text
        .split_whitespace()
        .map(|t| t.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("cannot parse `{key}` value `{text}`")))?;
    if vals.len() != n {
        return Err(Error::format(path, format!("`{key}` needs {n} values, got {}", vals.len())));
    }
    Ok(vals)
}

fn check_encoding(path: &Path, fields: &[(String, String)]) -> Result<()> {
    if field(path, fields, "dtype")? != "f32" || field(path, fields, "byteorder")? != "little" {
        return Err(Error::format(path, "only little-endian f32 payloads are supported"));
    }
    Ok(())
}

fn read_payload<R: Read>(path: &Path, r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = Vec::with_capacity(n * 4 + 1);
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() != n * 4 {
        return Err(Error::format(path, format!("payload holds {} bytes, header promises {}", buf.len(), n * 4)));
    }
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload holds non-finite values"));
    }
    Ok(data)
}

pub fn volume_from_reader(path: &Path, reader: impl Read) -> Result<Volume> {
    let mut r = BufReader::new(reader);
    let fields = read_header(path, &mut r, VOLUME_MAGIC)?;
    check_encoding(path, &fields)?;
    let dims: Vec<usize> = parse_list(path, "dims", field(path, &fields, "dims")?, 3)?;
    let spacing: f64 = parse_list(path, "spacing", field(path, &fields, "spacing")?, 1)?[0];
    let origin: Vec<f64> = parse_list(path, "origin", field(path, &fields, "origin")?, 3)?;
    let shape = [dims[0], dims[1], dims[2]];
    let data = read_payload(path, &mut r, shape.iter().product())?;
    let mut vol = Volume::from_data(shape, spacing, data).map_err(|e| Error::format(path, e.to_string()))?;
    vol.origin = [origin[0], origin[1], origin[2]];
    Ok(vol)
}

pub fn projections_from_reader(path: &Path, reader: impl Read) -> Result<ProjectionSet> {
    let mut r = BufReader::new(reader);
    let fields = read_header(path, &mut r, PROJ_MAGIC)?;
    check_encoding(path, &fields)?;
    let dims: Vec<usize> = parse_list(path, "dims", field(path, &fields, "dims")?, 3)?;
    let geometry: ConeBeamGeometry = serde_json::from_str(field(path, &fields, "geometry")?)
        .map_err(|e| Error::format(path, format!("geometry: {e}")))?;
    if geometry.hash() != field(path, &fields, "geometry_hash")? {
        return Err(Error::format(path, "geometry hash does not match the embedded geometry"));
    }
    if dims != [geometry.n_views(), geometry.detector_rows, geometry.detector_cols] {
        return Err(Error::format(path, "dims disagree with the embedded geometry"));
    }
    let data = read_payload(path, &mut r, dims.iter().product())?;
    ProjectionSet::new(geometry, data)
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    std::fs::write(path, volume_to_bytes(vol)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    volume_from_reader(path, std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_projections(path: &Path, proj: &ProjectionSet) -> Result<()> {
    std::fs::write(path, projections_to_bytes(proj)).map_err(|e| Error::io(path, e))
}

pub fn load_projections(path: &Path) -> Result<ProjectionSet> {
    projections_from_reader(path, std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Values as stored on disk (rounded through `f32`).
pub fn round_to_storage(data: &[f64]) -> Vec<f64> {
    data.iter().map(|&v| v as f32 as f64).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
