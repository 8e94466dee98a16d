//! Minimal single-file NIfTI-1 (`.nii`) reader and writer for 3D volumes.
//!
//! Supported on-disk types: uint8, int16, float32, float64. Files are written
//! little-endian with a 348-byte header, an empty 4-byte extension block and
//! the voxel data at offset 352. Either byte order is accepted on read.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::volume::Volume;
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW_X: usize = 280;
const OFF_MAGIC: usize = 344;

/// NIfTI-1 datatype codes handled here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::Uint8),
            4 => Some(DataType::Int16),
            16 => Some(DataType::Float32),
            64 => Some(DataType::Float64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

/// Decoded image plus the on-disk type it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub volume: Volume,
    pub datatype: DataType,
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(decode(&bytes)?.volume)
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume, datatype: DataType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(volume, datatype)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// Serializes `volume` as a little-endian `.nii` byte stream.
pub fn encode(volume: &Volume, datatype: DataType) -> Result<Vec<u8>> {
    let [nx, ny, nz] = volume.shape();
    for (axis, &n) in volume.shape().iter().enumerate() {
        if n > i16::MAX as usize {
            return Err(Error::param(format!("extent {n} on axis {axis} exceeds the NIfTI-1 limit")));
        }
    }
    let mut out = vec![0u8; DATA_OFFSET + volume.len() * datatype.bytes()];
    let h = &mut out[..DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[OFF_DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[OFF_DATATYPE..], datatype.code());
    LittleEndian::write_i16(&mut h[OFF_BITPIX..], (8 * datatype.bytes()) as i16);
    let vs = volume.voxel_size();
    let pixdim = [1.0f32, vs[0] as f32, vs[1] as f32, vs[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[OFF_PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[OFF_VOX_OFFSET..], DATA_OFFSET as f32);
    // scl_slope = 0 means "no scaling"
    LittleEndian::write_f32(&mut h[OFF_SCL_SLOPE..], 0.0);
    LittleEndian::write_f32(&mut h[OFF_SCL_INTER..], 0.0);
    h[OFF_XYZT_UNITS] = 2; // mm
    LittleEndian::write_i16(&mut h[OFF_SFORM_CODE..], 1);
    for row in 0..3 {
        LittleEndian::write_f32(&mut h[OFF_SROW_X + 16 * row + 4 * row..], vs[row] as f32);
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);

    let body = &mut out[DATA_OFFSET..];
    // file order is x fastest; our volumes have the last axis fastest
    let mut n = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = volume.get(i, j, k);
                write_value(&mut body[n * datatype.bytes()..], datatype, v)?;
                n += 1;
            }
        }
    }
    Ok(out)
}

fn write_value(buf: &mut [u8], datatype: DataType, v: f64) -> Result<()> {
    let integral = |lo: f64, hi: f64| {
        if v.fract() != 0.0 || v < lo || v > hi {
            Err(Error::param(format!("value {v} is not representable as {datatype:?}")))
        } else {
            Ok(())
        }
    };
    match datatype {
        DataType::Uint8 => {
            integral(0.0, 255.0)?;
            buf[0] = v as u8;
        }
        DataType::Int16 => {
            integral(f64::from(i16::MIN), f64::from(i16::MAX))?;
            LittleEndian::write_i16(buf, v as i16);
        }
        DataType::Float32 => LittleEndian::write_f32(buf, v as f32),
        DataType::Float64 => LittleEndian::write_f64(buf, v),
    }
    Ok(())
}

/// Parses a `.nii` byte stream.
pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated header: {} of {HEADER_SIZE} bytes", bytes.len()),
        ));
    }
    match (
        LittleEndian::read_i32(&bytes[0..4]),
        BigEndian::read_i32(&bytes[0..4]),
    ) {
        (348, _) => decode_with::<LittleEndian>(bytes),
        (_, 348) => decode_with::<BigEndian>(bytes),
        (v, _) => Err(Error::parse(0, format!("sizeof_hdr is {v}, expected 348"))),
    }
}

fn decode_with<B: ByteOrder>(bytes: &[u8]) -> Result<NiftiImage> {
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(Error::parse(
            OFF_MAGIC,
            format!(
                "magic {:?} is not a single-file NIfTI-1 (expected \"n+1\")",
                String::from_utf8_lossy(&bytes[OFF_MAGIC..OFF_MAGIC + 4])
            ),
        ));
    }
    let dim: Vec<i16> = (0..8).map(|i| B::read_i16(&bytes[OFF_DIM + 2 * i..])).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::parse(OFF_DIM, format!("expected a 3D image, got dim = {dim:?}")));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::parse(OFF_DIM, format!("non-positive extent in dim = {dim:?}")));
    }
    let code = B::read_i16(&bytes[OFF_DATATYPE..]);
    let datatype = DataType::from_code(code).ok_or_else(|| {
        Error::parse(OFF_DATATYPE, format!("unsupported datatype code {code}"))
    })?;
    let bitpix = B::read_i16(&bytes[OFF_BITPIX..]);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(Error::parse(
            OFF_BITPIX,
            format!("bitpix {bitpix} does not match datatype {datatype:?}"),
        ));
    }
    let pixdim: Vec<f32> = (0..8).map(|i| B::read_f32(&bytes[OFF_PIXDIM + 4 * i..])).collect();
    let vox_offset = B::read_f32(&bytes[OFF_VOX_OFFSET..]);
    if !(vox_offset >= DATA_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::parse(
            OFF_VOX_OFFSET,
            format!("vox_offset {vox_offset} must be an integer ≥ {DATA_OFFSET}"),
        ));
    }
    let start = vox_offset as usize;
    let slope = B::read_f32(&bytes[OFF_SCL_SLOPE..]);
    let inter = B::read_f32(&bytes[OFF_SCL_INTER..]);

    let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let n: usize = shape.iter().product();
    let needed = start + n * datatype.bytes();
    if bytes.len() < needed {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated voxel data: file has {} bytes, need {needed}", bytes.len()),
        ));
    }
    let body = &bytes[start..needed];
    let raw = |idx: usize| -> f64 {
        let b = &body[idx * datatype.bytes()..];
        match datatype {
            DataType::Uint8 => f64::from(b[0]),
            DataType::Int16 => f64::from(B::read_i16(b)),
            DataType::Float32 => f64::from(B::read_f32(b)),
            DataType::Float64 => B::read_f64(b),
        }
    };
    let scale = (slope != 0.0 && slope.is_finite()).then(|| (f64::from(slope), f64::from(inter)));
    let [nx, ny, nz] = shape;
    let mut data = vec![0.0; n];
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut v = raw(idx);
                if let Some((s, b)) = scale {
                    v = v * s + b;
                }
                data[(i * ny + j) * nz + k] = v;
                idx += 1;
            }
        }
    }
    let spacing = |p: f32| if p > 0.0 && p.is_finite() { f64::from(p) } else { 1.0 };
    let volume = Volume::new(shape, data)?.with_voxel_size([
        spacing(pixdim[1]),
        spacing(pixdim[2]),
        spacing(pixdim[3]),
    ])?;
    Ok(NiftiImage { volume, datatype })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_volume(shape: [usize; 3], dt: DataType, seed: u64) -> Volume {
        let mut r = rng::seeded(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| match dt {
                DataType::Uint8 => f64::from(r.gen::<u8>()),
                DataType::Int16 => f64::from(r.gen::<i16>()),
                DataType::Float32 => f64::from(r.gen::<f32>() * 200.0 - 100.0),
                DataType::Float64 => r.gen::<f64>() * 1e6 - 5e5,
            })
            .collect();
        Volume::new(shape, data)
            .unwrap()
            .with_voxel_size([1.0, 0.5, 2.0])
            .unwrap()
    }

    #[test]
    fn header_layout() {
        let v = random_volume([3, 4, 5], DataType::Float32, 1);
        let bytes = encode(&v, DataType::Float32).unwrap();
        assert_eq!(bytes.len(), 352 + 60 * 4);
        assert_eq!(LittleEndian::read_i32(&bytes[0..4]), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(LittleEndian::read_f32(&bytes[108..112]), 352.0);
        assert_eq!(LittleEndian::read_i16(&bytes[42..44]), 3);
        assert_eq!(LittleEndian::read_i16(&bytes[70..72]), 16);
        assert_eq!(LittleEndian::read_i16(&bytes[72..74]), 32);
        // first stored voxel is (0,0,0), second is (1,0,0)
        assert_eq!(f64::from(LittleEndian::read_f32(&bytes[356..360])), v.get(1, 0, 0));
    }

    #[test]
    fn binary_mask_round_trip() {
        let v = Volume::new([2, 2, 2], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let back = decode(&encode(&v, DataType::Uint8).unwrap()).unwrap();
        assert_eq!(back.volume, v);
        assert_eq!(back.datatype, DataType::Uint8);
    }

    #[test]
    fn malformed_headers() {
        let v = random_volume([2, 2, 2], DataType::Float64, 2);
        let good = encode(&v, DataType::Float64).unwrap();

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 344, .. })));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[70..72], 8);
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 70, .. })));

        let mut bad = good.clone();
        LittleEndian::write_i32(&mut bad[0..4], 540);
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 0, .. })));

        assert!(matches!(decode(&good[..200]), Err(Error::Parse { offset: 200, .. })));
        let cut = good.len() - 3;
        assert!(matches!(decode(&good[..cut]), Err(Error::Parse { offset, .. }) if offset == cut));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[40..42], 4);
        LittleEndian::write_i16(&mut bad[48..50], 3);
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 40, .. })));
    }

    #[test]
    fn scaling_is_applied_on_read() {
        let v = Volume::new([1, 1, 2], vec![10.0, 20.0]).unwrap();
        let mut bytes = encode(&v, DataType::Int16).unwrap();
        LittleEndian::write_f32(&mut bytes[112..116], 0.5);
        LittleEndian::write_f32(&mut bytes[116..120], 1.0);
        assert_eq!(decode(&bytes).unwrap().volume.data(), &[6.0, 11.0]);
    }

    #[test]
    fn big_endian_input() {
        let v = random_volume([2, 3, 2], DataType::Int16, 3);
        let le = encode(&v, DataType::Int16).unwrap();
        let mut be = le.clone();
        BigEndian::write_i32(&mut be[0..4], 348);
        for i in 0..8 {
            let x = LittleEndian::read_i16(&le[40 + 2 * i..]);
            BigEndian::write_i16(&mut be[40 + 2 * i..], x);
        }
        for off in [70, 72, 254] {
            BigEndian::write_i16(&mut be[off..], LittleEndian::read_i16(&le[off..]));
        }
        for i in 0..8 {
            BigEndian::write_f32(&mut be[76 + 4 * i..], LittleEndian::read_f32(&le[76 + 4 * i..]));
        }
        for off in [108, 112, 116] {
            BigEndian::write_f32(&mut be[off..], LittleEndian::read_f32(&le[off..]));
        }
        for n in 0..12 {
            let x = LittleEndian::read_i16(&le[352 + 2 * n..]);
            BigEndian::write_i16(&mut be[352 + 2 * n..], x);
        }
        assert_eq!(decode(&be).unwrap().volume, v);
    }

    #[test]
    fn non_integral_values_are_refused_for_integer_types() {
        let v = Volume::new([1, 1, 1], vec![0.5]).unwrap();
        assert!(encode(&v, DataType::Uint8).is_err());
        let v = Volume::new([1, 1, 1], vec![300.0]).unwrap();
        assert!(encode(&v, DataType::Uint8).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let v = random_volume([4, 3, 2], DataType::Float32, 4);
        write_volume(&path, &v, DataType::Float32).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
        assert!(matches!(read_volume(dir.path().join("missing.nii")), Err(Error::File { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::array::uniform3(1usize..7),
            which in 0usize..4,
            seed in any::<u64>(),
        ) {
            let dt = [DataType::Uint8, DataType::Int16, DataType::Float32, DataType::Float64][which];
            let v = random_volume(shape, dt, seed);
            let back = decode(&encode(&v, dt).unwrap()).unwrap();
            prop_assert_eq!(back.datatype, dt);
            prop_assert_eq!(back.volume.voxel_size(), v.voxel_size());
            for (a, b) in back.volume.data().iter().zip(v.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
