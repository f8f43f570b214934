//! File formats: dense probability tensors, netpbm label maps and images,
//! optical flow fields, CSV traces, box lists, and metric reports.
//!
//! Every format round-trips bit-exactly, and every reader distinguishes
//! its failure modes: a wrong magic is a header error, a well-formed
//! header over a short payload is a truncation error, and impossible
//! declared sizes are a dimension error. Recognizable-but-unsupported
//! variants (ASCII netpbm, wide maxval) get their own error so the message
//! can say what to convert rather than just "bad file".
//!
//! Volumes with several frames map onto inherently single-image formats by
//! vertical stacking: netpbm files carry a `# frames N` comment and store
//! the frames as one tall image, and multi-plane flow files declare the
//! stacked height while the reader re-slices against the caller's expected
//! geometry. A plain single-frame file from any other tool therefore reads
//! unchanged.

use crate::error::{DpnError, Result};
use crate::links::FlowField;
use crate::meanfield::MFTrace;
use crate::metrics::{BoundingBox, LabeledBox, MetricsReport};
use crate::tensor::{Activation, ImageVolume, LabelMap, ProbTensor, VolumeShape, IGNORE_LABEL};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Magic number of a flow file: the float 202021.25 little-endian.
const FLO_MAGIC: f32 = 202021.25;

/// Hard cap on declared payload elements (per file) so a corrupt header
/// cannot trigger an absurd allocation.
const MAX_ELEMENTS: u64 = 1 << 31;

// ---------------------------------------------------------------------------
// Dense tensor format
// ---------------------------------------------------------------------------

/// Write a channel volume as `DPT 1 <T> <H> <W> <C>` followed by
/// little-endian f32 values in `(t, y, x, c)` order.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Activation) -> Result<()> {
    let path = path.as_ref();
    let shape = tensor.shape;
    let mut bytes = Vec::with_capacity(32 + tensor.data().len() * 4);
    bytes.extend_from_slice(
        format!(
            "DPT 1 {} {} {} {}\n",
            shape.frames, shape.height, shape.width, tensor.channels
        )
        .as_bytes(),
    );
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| DpnError::io(path, e))
}

/// Write a probability tensor (label channels) in the dense tensor format.
pub fn write_prob(path: impl AsRef<Path>, prob: &ProbTensor) -> Result<()> {
    write_tensor(path, prob.as_activation())
}

/// Read a dense tensor file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Activation> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DpnError::io(path, e))?;
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad_header("tensor", path, "no header line"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| bad_header("tensor", path, "header is not ASCII"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&"DPT") {
        return Err(bad_header("tensor", path, "magic is not DPT"));
    }
    if fields.get(1) != Some(&"1") {
        return Err(DpnError::UnsupportedVariant {
            format: "tensor",
            path: path.to_path_buf(),
            detail: format!("version {} (only 1 is known)", fields.get(1).unwrap_or(&"?")),
        });
    }
    if fields.len() != 6 {
        return Err(bad_header(
            "tensor",
            path,
            &format!("expected 6 header fields, found {}", fields.len()),
        ));
    }
    let mut dims = [0u64; 4];
    for (slot, text) in dims.iter_mut().zip(&fields[2..]) {
        *slot = text
            .parse::<u64>()
            .map_err(|_| bad_header("tensor", path, &format!("non-numeric dimension {text}")))?;
    }
    let [t, h, w, c] = dims;
    let elements = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .filter(|&v| v > 0 && v <= MAX_ELEMENTS)
        .ok_or_else(|| DpnError::BadDimensions {
            format: "tensor",
            path: path.to_path_buf(),
            detail: format!("{t}x{h}x{w}x{c} is empty or too large"),
        })?;
    let payload = &bytes[header_end + 1..];
    let expected = elements * 4;
    if (payload.len() as u64) < expected {
        return Err(DpnError::TruncatedPayload {
            format: "tensor",
            path: path.to_path_buf(),
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(DpnError::BadDimensions {
            format: "tensor",
            path: path.to_path_buf(),
            detail: format!(
                "payload of {} bytes exceeds the declared {expected}",
                payload.len()
            ),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let shape = VolumeShape::new(t as usize, h as usize, w as usize)?;
    Activation::from_vec(shape, c as usize, data)
}

/// Read a dense tensor file as per-voxel label probabilities.
pub fn read_prob(path: impl AsRef<Path>) -> Result<ProbTensor> {
    ProbTensor::from_activation(read_tensor(path)?)
}

// ---------------------------------------------------------------------------
// Netpbm: binary PGM label maps and PPM images
// ---------------------------------------------------------------------------

/// Parsed netpbm header: dimensions plus the frame count from the
/// `# frames N` comment (1 when absent).
struct PbmHeader {
    width: usize,
    height: usize,
    frames: usize,
    payload_at: usize,
}

/// Parse a binary netpbm header of the given magic, tolerating comments.
/// `height` in the file is the stacked height `frames · per-frame height`.
fn parse_pbm_header(bytes: &[u8], magic: &str, format: &'static str, path: &Path) -> Result<PbmHeader> {
    if bytes.len() < 2 {
        return Err(bad_header(format, path, "file shorter than a magic number"));
    }
    let found_magic = &bytes[..2];
    let ascii_magic = match magic {
        "P5" => "P2",
        "P6" => "P3",
        _ => unreachable!("netpbm magic is P5 or P6"),
    };
    if found_magic == ascii_magic.as_bytes() {
        return Err(DpnError::UnsupportedVariant {
            format,
            path: path.to_path_buf(),
            detail: format!("ASCII {ascii_magic} variant (binary {magic} required)"),
        });
    }
    if found_magic != magic.as_bytes() {
        return Err(bad_header(
            format,
            path,
            &format!("magic is not {magic}"),
        ));
    }
    // Tokenize: whitespace-separated integers, with `#` comments running to
    // end of line. A `# frames N` comment declares the stacking.
    let mut frames = 1usize;
    let mut values = [0usize; 3];
    let mut have = 0usize;
    let mut i = 2usize;
    while have < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            let end = bytes[i..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| i + p)
                .unwrap_or(bytes.len());
            let comment = String::from_utf8_lossy(&bytes[i + 1..end]);
            let words: Vec<&str> = comment.split_whitespace().collect();
            if words.len() == 2 && words[0] == "frames" {
                if let Ok(n) = words[1].parse::<usize>() {
                    frames = n;
                }
            }
            i = end;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(bad_header(format, path, "header ended before its dimensions"));
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("digits are ASCII");
        values[have] = text
            .parse()
            .map_err(|_| bad_header(format, path, &format!("dimension {text} overflows")))?;
        have += 1;
    }
    let [width, stacked_height, maxval] = values;
    if maxval != 255 {
        return Err(DpnError::UnsupportedVariant {
            format,
            path: path.to_path_buf(),
            detail: format!("maxval {maxval} (only 255 is supported)"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(bad_header(format, path, "missing separator before payload"));
    }
    i += 1;
    if width == 0 || stacked_height == 0 {
        return Err(DpnError::BadDimensions {
            format,
            path: path.to_path_buf(),
            detail: format!("{width}x{stacked_height} image is empty"),
        });
    }
    if frames == 0 || stacked_height % frames != 0 {
        return Err(DpnError::BadDimensions {
            format,
            path: path.to_path_buf(),
            detail: format!("stacked height {stacked_height} does not split into {frames} frames"),
        });
    }
    let elements = (width as u64) * (stacked_height as u64);
    if elements > MAX_ELEMENTS {
        return Err(DpnError::BadDimensions {
            format,
            path: path.to_path_buf(),
            detail: format!("{width}x{stacked_height} is too large"),
        });
    }
    Ok(PbmHeader {
        width,
        height: stacked_height / frames,
        frames,
        payload_at: i,
    })
}

fn pbm_payload<'a>(
    bytes: &'a [u8],
    header: &PbmHeader,
    samples_per_pixel: u64,
    format: &'static str,
    path: &Path,
) -> Result<&'a [u8]> {
    let expected =
        header.frames as u64 * header.height as u64 * header.width as u64 * samples_per_pixel;
    let payload = &bytes[header.payload_at..];
    if (payload.len() as u64) < expected {
        return Err(DpnError::TruncatedPayload {
            format,
            path: path.to_path_buf(),
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(DpnError::BadDimensions {
            format,
            path: path.to_path_buf(),
            detail: format!(
                "payload of {} bytes exceeds the declared {expected}",
                payload.len()
            ),
        });
    }
    Ok(payload)
}

fn pbm_header_bytes(magic: &str, shape: VolumeShape) -> Vec<u8> {
    let mut bytes = format!("{magic}\n").into_bytes();
    if shape.frames > 1 {
        bytes.extend_from_slice(format!("# frames {}\n", shape.frames).as_bytes());
    }
    bytes.extend_from_slice(
        format!("{} {}\n255\n", shape.width, shape.frames * shape.height).as_bytes(),
    );
    bytes
}

/// Write a label map as a binary PGM (frames stacked vertically, noted in
/// a `# frames` comment). Byte 255 encodes the ignore label; concrete
/// labels must therefore fit 0..=254.
pub fn write_pgm_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = pbm_header_bytes("P5", labels.shape);
    for &l in labels.data() {
        if l == IGNORE_LABEL {
            bytes.push(255);
        } else if l <= 254 {
            bytes.push(l as u8);
        } else {
            return Err(DpnError::InvalidLabel {
                context: "label map export",
                detail: format!("label {l} does not fit the 0..=254 byte range"),
            });
        }
    }
    std::fs::write(path, bytes).map_err(|e| DpnError::io(path, e))
}

/// Read a binary PGM as a label map; byte 255 becomes the ignore label.
pub fn read_pgm_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DpnError::io(path, e))?;
    let header = parse_pbm_header(&bytes, "P5", "label map", path)?;
    let payload = pbm_payload(&bytes, &header, 1, "label map", path)?;
    let shape = VolumeShape::new(header.frames, header.height, header.width)?;
    let data: Vec<u16> = payload
        .iter()
        .map(|&b| if b == 255 { IGNORE_LABEL } else { b as u16 })
        .collect();
    LabelMap::new(shape, data)
}

/// Write an image volume as a binary PPM (frames stacked vertically).
pub fn write_ppm(path: impl AsRef<Path>, image: &ImageVolume) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = pbm_header_bytes("P6", image.shape);
    bytes.extend_from_slice(image.data());
    std::fs::write(path, bytes).map_err(|e| DpnError::io(path, e))
}

/// Read a binary PPM image volume.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DpnError::io(path, e))?;
    let header = parse_pbm_header(&bytes, "P6", "image", path)?;
    let payload = pbm_payload(&bytes, &header, 3, "image", path)?;
    let shape = VolumeShape::new(header.frames, header.height, header.width)?;
    ImageVolume::new(shape, payload.to_vec())
}

// ---------------------------------------------------------------------------
// Optical flow
// ---------------------------------------------------------------------------

/// Write a flow field in the conventional binary layout: magic 202021.25,
/// width and height as little-endian i32, then row-major interleaved
/// `(u, v)` f32 pairs. Multi-plane fields stack planes vertically into the
/// declared height.
pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + flow.data().len() * 4);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    bytes.extend_from_slice(&((flow.planes() * flow.height()) as i32).to_le_bytes());
    for v in flow.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| DpnError::io(path, e))
}

/// Read a flow file, re-slicing its stacked height into `planes` planes of
/// `height`×`width` — pass `planes = 1` for an ordinary single-pair file.
/// The declared geometry must match exactly.
pub fn read_flo(
    path: impl AsRef<Path>,
    planes: usize,
    height: usize,
    width: usize,
) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DpnError::io(path, e))?;
    if bytes.len() < 12 {
        return Err(bad_header("flow", path, "file shorter than its header"));
    }
    let magic = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != FLO_MAGIC {
        return Err(bad_header(
            "flow",
            path,
            &format!("magic {magic} is not {FLO_MAGIC}"),
        ));
    }
    let file_w = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let file_h = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if file_w <= 0 || file_h <= 0 || (file_w as u64) * (file_h as u64) * 2 > MAX_ELEMENTS {
        return Err(DpnError::BadDimensions {
            format: "flow",
            path: path.to_path_buf(),
            detail: format!("{file_w}x{file_h} is empty or too large"),
        });
    }
    if file_w as usize != width || file_h as usize != planes * height {
        return Err(DpnError::ShapeMismatch {
            context: "flow file geometry",
            expected: format!("{width}x{} ({planes} planes of {height} rows)", planes * height),
            found: format!("{file_w}x{file_h}"),
        });
    }
    let expected = (file_w as u64) * (file_h as u64) * 2 * 4;
    let payload = &bytes[12..];
    if (payload.len() as u64) < expected {
        return Err(DpnError::TruncatedPayload {
            format: "flow",
            path: path.to_path_buf(),
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(DpnError::BadDimensions {
            format: "flow",
            path: path.to_path_buf(),
            detail: format!(
                "payload of {} bytes exceeds the declared {expected}",
                payload.len()
            ),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FlowField::new(planes, height, width, data)
}

// ---------------------------------------------------------------------------
// CSV traces
// ---------------------------------------------------------------------------

/// Render an inference trace as `iter,free_energy,max_change` CSV text.
pub fn trace_csv(trace: &MFTrace) -> String {
    let mut s = String::from("iter,free_energy,max_change\n");
    for row in &trace.iterations {
        s.push_str(&format!(
            "{},{},{}\n",
            row.iteration, row.free_energy, row.max_change
        ));
    }
    s
}

/// Render a training loss history as `iter,loss` CSV text.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("iter,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{loss}\n"));
    }
    s
}

/// Write any text file, with path-carrying errors.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| DpnError::io(path, e))
}

// ---------------------------------------------------------------------------
// Box lists and metric reports
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    label: u16,
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

/// Serialize per-frame object boxes as a JSON array of arrays of
/// `{label, y0, x0, y1, x1}` records.
pub fn boxes_json(boxes: &[Vec<LabeledBox>]) -> String {
    let records: Vec<Vec<BoxRecord>> = boxes
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|b| BoxRecord {
                    label: b.label,
                    y0: b.rect.y0,
                    x0: b.rect.x0,
                    y1: b.rect.y1,
                    x1: b.rect.x1,
                })
                .collect()
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("box serialization cannot fail")
}

/// Parse a per-frame box list, checking corner order.
pub fn parse_boxes_json(text: &str) -> Result<Vec<Vec<LabeledBox>>> {
    let records: Vec<Vec<BoxRecord>> = serde_json::from_str(text).map_err(|e| {
        DpnError::InvalidConfig {
            field: "boxes",
            reason: format!("not a valid box list: {e}"),
        }
    })?;
    records
        .into_iter()
        .map(|frame| {
            frame
                .into_iter()
                .map(|r| {
                    if r.y1 < r.y0 || r.x1 < r.x0 {
                        return Err(DpnError::InvalidConfig {
                            field: "boxes",
                            reason: format!(
                                "corners out of order: ({},{}) to ({},{})",
                                r.y0, r.x0, r.y1, r.x1
                            ),
                        });
                    }
                    Ok(LabeledBox {
                        label: r.label,
                        rect: BoundingBox {
                            y0: r.y0,
                            x0: r.x0,
                            y1: r.y1,
                            x1: r.x1,
                        },
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<Vec<LabeledBox>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DpnError::io(path, e))?;
    parse_boxes_json(&text)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[Vec<LabeledBox>]) -> Result<()> {
    write_text(path, &boxes_json(boxes))
}

/// Machine-readable key-value rendering of a metrics report.
pub fn metrics_json(report: &MetricsReport) -> String {
    #[derive(Serialize)]
    struct ReportRecord<'a> {
        per_class_iou: &'a [Option<f64>],
        miou: f64,
        ta: f64,
        la_biou: f64,
        ba: f64,
    }
    serde_json::to_string_pretty(&ReportRecord {
        per_class_iou: &report.per_class_iou,
        miou: report.miou,
        ta: report.ta,
        la_biou: report.la_biou,
        ba: report.ba,
    })
    .expect("report serialization cannot fail")
}

fn bad_header(format: &'static str, path: &Path, detail: &str) -> DpnError {
    DpnError::BadHeader {
        format,
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(t: usize, h: usize, w: usize) -> VolumeShape {
        VolumeShape::new(t, h, w).unwrap()
    }

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    // -- tensors -----------------------------------------------------------

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tmp();
        let path = dir.path().join("t.dpt");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = shape(2, 3, 5);
        let data: Vec<f32> = (0..s.voxels() * 4).map(|_| rng.random::<f32>()).collect();
        let tensor = Activation::from_vec(s, 4, data).unwrap();
        write_tensor(&path, &tensor).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape, s);
        assert_eq!(back.channels, 4);
        // Bit-level equality, not approximate.
        let bits = |a: &Activation| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&tensor), bits(&back));
    }

    #[test]
    fn hand_built_header_and_payload_parse() {
        let dir = tmp();
        let path = dir.path().join("t.dpt");
        let mut bytes = b"DPT 1 1 2 2 3\n".to_vec();
        for i in 0..12 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let tensor = read_tensor(&path).unwrap();
        assert_eq!(tensor.shape, shape(1, 2, 2));
        assert_eq!(tensor.channels, 3);
        assert_eq!(tensor.get(0, 1, 1, 2), 11.0);
    }

    #[test]
    fn short_payload_reports_expected_and_found_bytes() {
        let dir = tmp();
        let path = dir.path().join("t.dpt");
        let mut bytes = b"DPT 1 1 2 2 3\n".to_vec();
        bytes.extend_from_slice(&[0u8; 47]);
        std::fs::write(&path, bytes).unwrap();
        match read_tensor(&path) {
            Err(DpnError::TruncatedPayload {
                expected, found, ..
            }) => {
                assert_eq!(expected, 48);
                assert_eq!(found, 47);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn tensor_error_kinds_are_distinct() {
        let dir = tmp();
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.path().join(name);
            std::fs::write(&p, bytes).unwrap();
            p
        };
        let bad_magic = write("a.dpt", b"DPX 1 1 1 1 1\n\0\0\0\0");
        assert!(matches!(
            read_tensor(&bad_magic),
            Err(DpnError::BadHeader { .. })
        ));
        let bad_version = write("b.dpt", b"DPT 2 1 1 1 1\n\0\0\0\0");
        assert!(matches!(
            read_tensor(&bad_version),
            Err(DpnError::UnsupportedVariant { .. })
        ));
        let zero_dim = write("c.dpt", b"DPT 1 0 1 1 1\n");
        assert!(matches!(
            read_tensor(&zero_dim),
            Err(DpnError::BadDimensions { .. })
        ));
        let overflow = write("d.dpt", b"DPT 1 99999999 99999999 99999999 99\n");
        assert!(matches!(
            read_tensor(&overflow),
            Err(DpnError::BadDimensions { .. })
        ));
        let trailing = {
            let mut b = b"DPT 1 1 1 1 1\n".to_vec();
            b.extend_from_slice(&[0u8; 8]);
            write("e.dpt", &b)
        };
        assert!(matches!(
            read_tensor(&trailing),
            Err(DpnError::BadDimensions { .. })
        ));
    }

    #[test]
    fn prob_reader_rejects_non_probability_payloads() {
        let dir = tmp();
        let path = dir.path().join("p.dpt");
        let tensor = Activation::from_vec(shape(1, 1, 1), 2, vec![-1.0, 2.0]).unwrap();
        write_tensor(&path, &tensor).unwrap();
        assert!(read_prob(&path).is_err());
        let tensor = Activation::from_vec(shape(1, 1, 1), 2, vec![0.25, 0.75]).unwrap();
        write_tensor(&path, &tensor).unwrap();
        assert_eq!(read_prob(&path).unwrap().voxel(0), &[0.25, 0.75]);
    }

    // -- label maps --------------------------------------------------------

    #[test]
    fn pgm_bytes_map_to_labels_with_255_as_ignore() {
        let dir = tmp();
        let path = dir.path().join("l.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\x01\x02\xff").unwrap();
        let labels = read_pgm_labels(&path).unwrap();
        assert_eq!(
            labels.data(),
            &[0, 1, 2, IGNORE_LABEL]
        );
    }

    #[test]
    fn label_round_trip_including_multi_frame_and_ignore() {
        let dir = tmp();
        let path = dir.path().join("l.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = shape(3, 4, 5);
        let data: Vec<u16> = (0..s.voxels())
            .map(|_| {
                if rng.random::<f32>() < 0.1 {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..10u16)
                }
            })
            .collect();
        let labels = LabelMap::new(s, data).unwrap();
        write_pgm_labels(&path, &labels).unwrap();
        let back = read_pgm_labels(&path).unwrap();
        assert_eq!(back.shape, s);
        assert_eq!(back.data(), labels.data());
    }

    #[test]
    fn single_frame_pgm_has_no_frames_comment() {
        let dir = tmp();
        let path = dir.path().join("l.pgm");
        write_pgm_labels(&path, &LabelMap::filled(shape(1, 2, 2), 3)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes, b"P5\n2 2\n255\n\x03\x03\x03\x03");
    }

    #[test]
    fn labels_beyond_byte_range_refuse_to_serialize() {
        let dir = tmp();
        let path = dir.path().join("l.pgm");
        let labels = LabelMap::filled(shape(1, 1, 1), 255);
        assert!(matches!(
            write_pgm_labels(&path, &labels),
            Err(DpnError::InvalidLabel { .. })
        ));
    }

    #[test]
    fn pgm_error_kinds_are_distinct() {
        let dir = tmp();
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.path().join(name);
            std::fs::write(&p, bytes).unwrap();
            p
        };
        let ascii = write("a.pgm", b"P2\n2 2\n255\n0 1 2 3\n");
        assert!(matches!(
            read_pgm_labels(&ascii),
            Err(DpnError::UnsupportedVariant { .. })
        ));
        let magic = write("b.pgm", b"P7\n2 2\n255\n\0\0\0\0");
        assert!(matches!(
            read_pgm_labels(&magic),
            Err(DpnError::BadHeader { .. })
        ));
        let maxval = write("c.pgm", b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0");
        assert!(matches!(
            read_pgm_labels(&maxval),
            Err(DpnError::UnsupportedVariant { .. })
        ));
        let short = write("d.pgm", b"P5\n2 2\n255\n\0\0\0");
        assert!(matches!(
            read_pgm_labels(&short),
            Err(DpnError::TruncatedPayload { .. })
        ));
        let frames = write("e.pgm", b"P5\n# frames 2\n2 3\n255\n\0\0\0\0\0\0");
        assert!(matches!(
            read_pgm_labels(&frames),
            Err(DpnError::BadDimensions { .. })
        ));
    }

    // -- images ------------------------------------------------------------

    #[test]
    fn ppm_round_trip_preserves_pixels() {
        let dir = tmp();
        let path = dir.path().join("i.ppm");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = shape(2, 3, 4);
        let mut image = ImageVolume::filled(s, [0, 0, 0]);
        for t in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    image.set_rgb(t, y, x, [rng.random(), rng.random(), rng.random()]);
                }
            }
        }
        write_ppm(&path, &image).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape, s);
        assert_eq!(back.data(), image.data());
    }

    #[test]
    fn ascii_ppm_is_a_distinct_unsupported_variant() {
        let dir = tmp();
        let path = dir.path().join("i.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(matches!(
            read_ppm(&path),
            Err(DpnError::UnsupportedVariant { .. })
        ));
    }

    #[test]
    fn plain_single_frame_ppm_from_another_tool_reads_as_one_frame() {
        let dir = tmp();
        let path = dir.path().join("i.ppm");
        std::fs::write(&path, b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let image = read_ppm(&path).unwrap();
        assert_eq!(image.shape, shape(1, 1, 2));
        assert_eq!(image.rgb(0, 0, 1), [4, 5, 6]);
    }

    // -- flow --------------------------------------------------------------

    #[test]
    fn flo_round_trip_across_planes() {
        let dir = tmp();
        let path = dir.path().join("f.flo");
        let mut flow = FlowField::zeros(2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    flow.set_uv(t, y, x, rng.random::<f32>() * 4.0 - 2.0, rng.random::<f32>());
                }
            }
        }
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path, 2, 3, 4).unwrap();
        assert_eq!(back.data(), flow.data());
        // Mismatched expectations are named, not silently re-sliced.
        assert!(matches!(
            read_flo(&path, 3, 3, 4),
            Err(DpnError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            read_flo(&path, 2, 3, 5),
            Err(DpnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn wrong_flo_magic_is_a_header_error() {
        let dir = tmp();
        let path = dir.path().join("f.flo");
        let mut bytes = 123.456f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_flo(&path, 1, 1, 1),
            Err(DpnError::BadHeader { .. })
        ));
    }

    #[test]
    fn truncated_flo_payload_is_reported() {
        let dir = tmp();
        let path = dir.path().join("f.flo");
        let mut bytes = FLO_MAGIC.to_le_bytes().to_vec();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]); // needs 16
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_flo(&path, 1, 1, 2),
            Err(DpnError::TruncatedPayload { .. })
        ));
    }

    // -- CSV ---------------------------------------------------------------

    #[test]
    fn trace_and_loss_csv_are_line_per_row() {
        use crate::meanfield::TraceRow;
        let trace = MFTrace {
            iterations: vec![
                TraceRow {
                    iteration: 1,
                    free_energy: -3.5,
                    max_change: 0.25,
                },
                TraceRow {
                    iteration: 2,
                    free_energy: -4.0,
                    max_change: 0.0,
                },
            ],
        };
        assert_eq!(
            trace_csv(&trace),
            "iter,free_energy,max_change\n1,-3.5,0.25\n2,-4,0\n"
        );
        assert_eq!(loss_csv(&[1.5, 0.75]), "iter,loss\n0,1.5\n1,0.75\n");
    }

    // -- boxes and reports -------------------------------------------------

    #[test]
    fn boxes_round_trip_through_json() {
        let boxes = vec![
            vec![
                LabeledBox {
                    label: 1,
                    rect: BoundingBox {
                        y0: 0,
                        x0: 1,
                        y1: 2,
                        x1: 3,
                    },
                },
                LabeledBox {
                    label: 2,
                    rect: BoundingBox {
                        y0: 4,
                        x0: 4,
                        y1: 5,
                        x1: 6,
                    },
                },
            ],
            vec![],
        ];
        let text = boxes_json(&boxes);
        assert_eq!(parse_boxes_json(&text).unwrap(), boxes);
    }

    #[test]
    fn malformed_boxes_are_rejected() {
        assert!(parse_boxes_json("not json").is_err());
        // Corners out of order.
        let text = r#"[[{"label": 1, "y0": 5, "x0": 0, "y1": 2, "x1": 3}]]"#;
        assert!(parse_boxes_json(text).is_err());
    }

    #[test]
    fn metrics_json_carries_every_key() {
        let report = MetricsReport {
            per_class_iou: vec![Some(1.0), None],
            miou: 1.0,
            ta: 0.5,
            la_biou: 0.25,
            ba: 0.125,
        };
        let text = metrics_json(&report);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["miou"], 1.0);
        assert_eq!(value["ta"], 0.5);
        assert_eq!(value["la_biou"], 0.25);
        assert_eq!(value["ba"], 0.125);
        assert_eq!(value["per_class_iou"][0], 1.0);
        assert!(value["per_class_iou"][1].is_null());
    }
}
