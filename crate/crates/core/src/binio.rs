//! Little-endian binary helpers shared by the corpus and checkpoint formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub(crate) fn write_array1<W: Write>(w: &mut W, a: &Array1<f64>) -> Result<()> {
    w.write_u64::<LittleEndian>(a.len() as u64)?;
    for &x in a.iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_array1<R: Read>(r: &mut R) -> Result<Array1<f64>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Array1::from_vec(data))
}

pub(crate) fn write_array2<W: Write>(w: &mut W, a: &Array2<f64>) -> Result<()> {
    w.write_u64::<LittleEndian>(a.nrows() as u64)?;
    w.write_u64::<LittleEndian>(a.ncols() as u64)?;
    for &x in a.iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_array2<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("bad matrix shape: {e}")))
}
