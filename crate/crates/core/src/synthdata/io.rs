//! Dataset record file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header : b"TCLD" | version u32 | count u32 | height u32 | width u32 | grid u32
//! record : image   f32 x (3 * height * width), channel-major
//!          caption u16 x 16
//!          objects u8, then per object: shape u8 | color u8 | row u8 | col u8
//! ```
//!
//! A record's pair id is its index in the file.

use std::io::{Read, Write};

use super::{vocab::MAX_LEN, Color, Image, Scene, SceneObject, ShapeKind, SyntheticPair};
use crate::error::{Result, TclError};

pub const DATASET_MAGIC: &[u8; 4] = b"TCLD";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(mut w: W, pairs: &[SyntheticPair]) -> Result<()> {
    let first = pairs.first().ok_or_else(|| TclError::Contract("cannot write an empty dataset".into()))?;
    let (h, wd, grid) = (first.image.height, first.image.width, first.scene.grid);
    w.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, pairs.len() as u32, h as u32, wd as u32, grid as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in pairs {
        if (p.image.height, p.image.width, p.scene.grid) != (h, wd, grid) {
            return Err(TclError::Contract("all records must share image size and grid".into()));
        }
        if p.caption.len() != MAX_LEN {
            return Err(TclError::Contract(format!("caption length {} != {MAX_LEN}", p.caption.len())));
        }
        for &v in &p.image.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &t in &p.caption {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&[p.scene.objects.len() as u8])?;
        for o in &p.scene.objects {
            let shape = ShapeKind::ALL.iter().position(|s| *s == o.shape).unwrap_or(0) as u8;
            let color = Color::ALL.iter().position(|c| *c == o.color).unwrap_or(0) as u8;
            w.write_all(&[shape, color, o.row as u8, o.col as u8])?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<SyntheticPair>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(TclError::Format("not a TCLD dataset file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(TclError::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let grid = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    let mut fbuf = vec![0u8; 4 * Image::CHANNELS * h * w];
    for pair_id in 0..count {
        r.read_exact(&mut fbuf)?;
        let data = fbuf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let mut cap = [0u8; 2 * MAX_LEN];
        r.read_exact(&mut cap)?;
        let caption = cap.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let mut n = [0u8; 1];
        r.read_exact(&mut n)?;
        let mut objects = Vec::with_capacity(n[0] as usize);
        for _ in 0..n[0] {
            let mut o = [0u8; 4];
            r.read_exact(&mut o)?;
            let shape = *ShapeKind::ALL.get(o[0] as usize).ok_or_else(|| TclError::Format("bad shape code".into()))?;
            let color = *Color::ALL.get(o[1] as usize).ok_or_else(|| TclError::Format("bad color code".into()))?;
            objects.push(SceneObject { shape, color, row: o[2] as usize, col: o[3] as usize });
        }
        out.push(SyntheticPair {
            image: Image { height: h, width: w, data },
            caption,
            scene: Scene { grid, objects },
            pair_id: pair_id as u64,
        });
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, DataSpec};
    use super::*;

    #[test]
    fn dataset_file_round_trips() {
        let data = generate_dataset(20, 5, &DataSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        assert_eq!(&buf[..4], b"TCLD");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 20);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(read_dataset(&b"XXXX\0\0\0\0"[..]), Err(TclError::Format(_))));
    }
}
