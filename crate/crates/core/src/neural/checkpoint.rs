//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic "RFQNCKPT" | version u32 | layer_count u32
//! layer_count × (rows u32, cols u32)
//! parameters: per layer, weights row-major then bias (f64)
//! Adam first moments, same order
//! Adam second moments, same order
//! Adam timestep t u64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{AdamState, Layer, LayerSet, MlpSpec, NeuralError, QNetwork};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFQNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_layers<W: Write>(out: &mut W, layers: &[Layer]) -> std::io::Result<()> {
    for l in layers {
        for x in l.weights.iter().chain(&l.bias) {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut out: W, net: &QNetwork, adam: &AdamState) -> Result<(), NeuralError> {
    if !adam.matches(net) {
        return Err(NeuralError::Shape("optimizer state does not match network".into()));
    }
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for l in net.layers() {
        out.write_all(&(l.rows as u32).to_le_bytes())?;
        out.write_all(&(l.cols as u32).to_le_bytes())?;
    }
    write_layers(&mut out, net.layers())?;
    write_layers(&mut out, &adam.first_moment)?;
    write_layers(&mut out, &adam.second_moment)?;
    out.write_all(&adam.t.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N], NeuralError> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => NeuralError::Format("truncated checkpoint".into()),
        _ => NeuralError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, NeuralError> {
    Ok(u32::from_le_bytes(read_exact::<R, 4>(input)?))
}

fn read_layers<R: Read>(input: &mut R, shapes: &[(usize, usize)]) -> Result<LayerSet, NeuralError> {
    shapes
        .iter()
        .map(|&(rows, cols)| {
            let mut layer = Layer::zeros(rows, cols);
            for x in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *x = f64::from_le_bytes(read_exact::<R, 8>(input)?);
            }
            Ok(layer)
        })
        .collect()
}

/// Reads a checkpoint. When `expected` is given, the stored layer shapes must
/// match it exactly.
pub fn read_checkpoint<R: Read>(
    mut input: R,
    expected: Option<&MlpSpec>,
) -> Result<(QNetwork, AdamState), NeuralError> {
    let magic: [u8; 8] = read_exact(&mut input)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NeuralError::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    if count == 0 || count > 1024 {
        return Err(NeuralError::Format(format!("implausible layer count {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(&mut input)? as usize;
        let cols = read_u32(&mut input)? as usize;
        shapes.push((rows, cols));
    }
    if let Some(spec) = expected {
        let dims = spec.dims();
        let want: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[1], w[0])).collect();
        if want != shapes {
            return Err(NeuralError::Shape(format!("checkpoint layers {shapes:?} but spec requires {want:?}")));
        }
    }
    let net =
        QNetwork::from_layers(read_layers(&mut input, &shapes)?).map_err(|e| NeuralError::Shape(e.to_string()))?;
    let mut adam = AdamState::new(&net);
    adam.first_moment = read_layers(&mut input, &shapes)?;
    adam.second_moment = read_layers(&mut input, &shapes)?;
    adam.t = u64::from_le_bytes(read_exact::<_, 8>(&mut input)?);
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(NeuralError::Format("trailing bytes after checkpoint".into()));
    }
    Ok((net, adam))
}

pub fn save_checkpoint(net: &QNetwork, adam: &AdamState, path: &Path) -> Result<(), NeuralError> {
    write_checkpoint(BufWriter::new(File::create(path)?), net, adam)
}

pub fn load_checkpoint(path: &Path, expected: Option<&MlpSpec>) -> Result<(QNetwork, AdamState), NeuralError> {
    read_checkpoint(BufReader::new(File::open(path)?), expected)
}
