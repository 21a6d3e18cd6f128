use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAX_NAME: usize = 4096;

pub(crate) fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::format(what, "truncated"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::format(what, "truncated"))?;
    Ok(u64::from_le_bytes(b))
}

/// Length-prefixed (u32 little-endian) UTF-8 string.
pub(crate) fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

pub(crate) fn read_name(r: &mut impl Read, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > MAX_NAME {
        return Err(Error::format(what, format!("name length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::format(what, "truncated name"))?;
    String::from_utf8(buf).map_err(|_| Error::format(what, "name is not UTF-8"))
}
