//! Binary model files: the magic `PRCNN1`, the layer dimensions as
//! little-endian `u32`, the parameter count as `u64`, then every parameter
//! as a little-endian `f64` in storage order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Arch, CnnError, CnnModel};

const MAGIC: &[u8; 6] = b"PRCNN1";

pub fn write_model(model: &CnnModel, out: &mut impl Write) -> Result<(), CnnError> {
    let a = model.arch();
    out.write_all(MAGIC)?;
    let dims = [a.input, a.channels, a.classes, a.kernels.len()];
    for d in dims.iter().chain(&a.kernels) {
        out.write_all(&(*d as u32).to_le_bytes())?;
    }
    out.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(src: &mut impl Read) -> Result<usize, CnnError> {
    let mut b = [0u8; 4];
    src.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> CnnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CnnError::Format("truncated file".into())
    } else {
        CnnError::Io(e)
    }
}

pub fn read_model(src: &mut impl Read) -> Result<CnnModel, CnnError> {
    let mut magic = [0u8; 6];
    src.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(CnnError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "PRCNN1"
        )));
    }
    let input = read_u32(src)?;
    let channels = read_u32(src)?;
    let classes = read_u32(src)?;
    let blocks = read_u32(src)?;
    if blocks > 16 {
        return Err(CnnError::Format(format!("{blocks} blocks")));
    }
    let kernels = (0..blocks).map(|_| read_u32(src)).collect::<Result<Vec<_>, _>>()?;
    let arch = Arch {
        input,
        channels,
        kernels,
        classes,
    };
    arch.validate().map_err(|e| CnnError::Format(e.to_string()))?;
    let mut b = [0u8; 8];
    src.read_exact(&mut b).map_err(truncated)?;
    let count = u64::from_le_bytes(b) as usize;
    if count != arch.num_params() {
        return Err(CnnError::Format(format!(
            "header declares {count} parameters, architecture needs {}",
            arch.num_params()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        src.read_exact(&mut b).map_err(truncated)?;
        params.push(f64::from_le_bytes(b));
    }
    if src.read(&mut [0u8; 1])? != 0 {
        return Err(CnnError::Format("trailing bytes".into()));
    }
    CnnModel::from_params(arch, params)
}

pub fn save_model(model: &CnnModel, path: &Path) -> Result<(), CnnError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CnnModel, CnnError> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = CnnModel::new(Arch::standard(), 3).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(&buf[..6], b"PRCNN1");
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let x: Vec<f64> = (0..4096).map(|i| f64::from((i % 7 == 0) as u8)).collect();
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let m = CnnModel::new(Arch::standard(), 3).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_model(&mut &cut[..]), Err(CnnError::Format(_))));
        let mut bad = buf.clone();
        bad[5] = b'2';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(CnnError::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_model(&mut long.as_slice()), Err(CnnError::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = CnnModel::new(Arch::standard(), 5).unwrap();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}
