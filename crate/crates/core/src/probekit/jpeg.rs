//! Baseline sequential JPEG (8x8 DCT, Huffman, 8-bit samples).
//!
//! Quantization uses the Annex K example tables scaled with the libjpeg
//! quality formula. Colour images are converted to YCbCr; chroma is
//! subsampled 4:2:0 below quality 90 and kept at full resolution from 90 up
//! (the same cut-off ImageMagick uses). Grayscale images are written as a
//! single component. The encoder
//! produces a complete JFIF stream and the decoder reads baseline streams
//! (interleaved single scan, optional restart intervals), so the round trip
//! goes through a real byte stream rather than a shortcut quantizer.

use std::sync::OnceLock;

use super::RawImage;
use crate::error::{Error, Result};

/// Natural (row-major) index of the k-th coefficient in zigzag order.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

#[rustfmt::skip]
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_QUANT: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

const DC_LUMA_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const DC_CHROMA_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const DC_VALUES: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

const AC_LUMA_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
#[rustfmt::skip]
const AC_LUMA_VALUES: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];

const AC_CHROMA_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
#[rustfmt::skip]
const AC_CHROMA_VALUES: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
    0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
    0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
    0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];

/// Scale an Annex K base table with libjpeg's `jpeg_quality_scaling` rule,
/// clamped to baseline-legal 8-bit entries.
pub fn scaled_quant_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        let v = (u32::from(b) * scale + 50) / 100;
        *o = v.clamp(1, 255) as u16;
    }
    out
}

pub fn luma_table(quality: u8) -> [u16; 64] {
    scaled_quant_table(&LUMA_QUANT, quality)
}

pub fn chroma_table(quality: u8) -> [u16; 64] {
    scaled_quant_table(&CHROMA_QUANT, quality)
}

/// `basis[u][x] = 0.5 * c(u) * cos((2x + 1) u pi / 16)`; the 2-D DCT is
/// `B f B^T` and its inverse `B^T F B`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                let angle = ((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0;
                *v = 0.5 * cu * angle.cos();
            }
        }
        b
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = sum_x block[y][x] * b[u][x]
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                s += block[y * 8 + x] * b[u][x];
            }
            tmp[y * 8 + u] = s;
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for y in 0..8 {
                s += tmp[y * 8 + u] * b[v][y];
            }
            out[v * 8 + u] = s;
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    // columns first: tmp[y][u] = sum_v coef[v][u] * b[v][y]
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for v in 0..8 {
                s += coef[v * 8 + u] * b[v][y];
            }
            tmp[y * 8 + u] = s;
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                s += tmp[y * 8 + u] * b[u][x];
            }
            out[y * 8 + x] = s;
        }
    }
    out
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One 8-bit sample plane, padded to whole MCUs.
#[derive(Clone)]
struct Plane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Plane {
    fn new(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    fn block(&self, bx: usize, by: usize) -> [f64; 64] {
        let mut out = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                out[y * 8 + x] = f64::from(self.at(bx * 8 + x, by * 8 + y)) - 128.0;
            }
        }
        out
    }

    fn put_block(&mut self, bx: usize, by: usize, samples: &[f64; 64]) {
        for y in 0..8 {
            for x in 0..8 {
                let idx = (by * 8 + y) * self.width + bx * 8 + x;
                self.data[idx] = clamp_u8(samples[y * 8 + x] + 128.0);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Huffman tables

struct HuffEncoder {
    code: [u16; 256],
    size: [u8; 256],
}

impl HuffEncoder {
    fn new(bits: &[u8; 16], values: &[u8]) -> Self {
        let mut code = [0u16; 256];
        let mut size = [0u8; 256];
        let mut c: u16 = 0;
        let mut k = 0;
        for (len_minus_one, &count) in bits.iter().enumerate() {
            for _ in 0..count {
                let sym = values[k] as usize;
                code[sym] = c;
                size[sym] = (len_minus_one + 1) as u8;
                c += 1;
                k += 1;
            }
            c <<= 1;
        }
        HuffEncoder { code, size }
    }
}

#[derive(Clone)]
struct HuffDecoder {
    /// Largest code of each length, or -1 when no codes have that length.
    max_code: [i32; 17],
    /// `values` index minus the first code of each length.
    offset: [i32; 17],
    values: Vec<u8>,
}

impl HuffDecoder {
    fn new(bits: &[u8; 16], values: Vec<u8>) -> Result<Self> {
        let total: usize = bits.iter().map(|&b| b as usize).sum();
        if total != values.len() || total > 256 {
            return Err(Error::Parse("inconsistent Huffman table".into()));
        }
        let mut max_code = [-1i32; 17];
        let mut offset = [0i32; 17];
        let mut code: i32 = 0;
        let mut k: i32 = 0;
        for len in 1..=16 {
            let count = i32::from(bits[len - 1]);
            if count > 0 {
                offset[len] = k - code;
                code += count;
                k += count;
                max_code[len] = code - 1;
            }
            if code > (1 << len) {
                return Err(Error::Parse("oversubscribed Huffman table".into()));
            }
            code <<= 1;
        }
        Ok(HuffDecoder {
            max_code,
            offset,
            values,
        })
    }
}

// ---------------------------------------------------------------------------
// Encoder

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        BitWriter {
            out,
            acc: 0,
            nbits: 0,
        }
    }

    fn put(&mut self, code: u16, size: u8) {
        debug_assert!(size <= 16);
        self.acc = (self.acc << size) | u32::from(code);
        self.nbits += u32::from(size);
        while self.nbits >= 8 {
            let byte = (self.acc >> (self.nbits - 8)) as u8;
            self.out.push(byte);
            if byte == 0xFF {
                self.out.push(0x00);
            }
            self.nbits -= 8;
            self.acc &= (1 << self.nbits) - 1;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.put(((1u32 << pad) - 1) as u16, pad as u8);
        }
        self.out
    }
}

fn magnitude_category(v: i32) -> u8 {
    (32 - v.unsigned_abs().leading_zeros()) as u8
}

fn magnitude_bits(v: i32, cat: u8) -> u16 {
    if v >= 0 {
        v as u16
    } else {
        ((v - 1) & ((1 << cat) - 1)) as u16
    }
}

fn encode_block(
    w: &mut BitWriter,
    coefs: &[i32; 64],
    prev_dc: &mut i32,
    dc: &HuffEncoder,
    ac: &HuffEncoder,
) {
    let diff = coefs[0] - *prev_dc;
    *prev_dc = coefs[0];
    let cat = magnitude_category(diff);
    w.put(dc.code[cat as usize], dc.size[cat as usize]);
    if cat > 0 {
        w.put(magnitude_bits(diff, cat), cat);
    }
    let mut run = 0u8;
    for &nat in ZIGZAG.iter().skip(1) {
        let v = coefs[nat];
        if v == 0 {
            run += 1;
            continue;
        }
        while run >= 16 {
            w.put(ac.code[0xF0], ac.size[0xF0]);
            run -= 16;
        }
        let cat = magnitude_category(v);
        let sym = ((run << 4) | cat) as usize;
        w.put(ac.code[sym], ac.size[sym]);
        w.put(magnitude_bits(v, cat), cat);
        run = 0;
    }
    if run > 0 {
        w.put(ac.code[0x00], ac.size[0x00]);
    }
}

fn quantize(block: &[f64; 64], table: &[u16; 64]) -> [i32; 64] {
    let coef = fdct(block);
    let mut q = [0i32; 64];
    for i in 0..64 {
        q[i] = (coef[i] / f64::from(table[i])).round() as i32;
    }
    q
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn write_dqt(out: &mut Vec<u8>, id: u8, table: &[u16; 64]) {
    out.extend_from_slice(&[0xFF, 0xDB]);
    push_u16(out, 67);
    out.push(id);
    for &nat in ZIGZAG.iter() {
        out.push(table[nat] as u8);
    }
}

fn write_dht(out: &mut Vec<u8>, class_id: u8, bits: &[u8; 16], values: &[u8]) {
    out.extend_from_slice(&[0xFF, 0xC4]);
    push_u16(out, (2 + 1 + 16 + values.len()) as u16);
    out.push(class_id);
    out.extend_from_slice(bits);
    out.extend_from_slice(values);
}

/// Replicate edge samples so the plane covers whole MCUs.
fn padded_plane(width: usize, height: usize, pw: usize, ph: usize, sample: impl Fn(usize, usize) -> u8) -> Plane {
    let mut p = Plane::new(pw, ph);
    for y in 0..ph {
        let sy = y.min(height - 1);
        for x in 0..pw {
            let sx = x.min(width - 1);
            p.data[y * pw + x] = sample(sx, sy);
        }
    }
    p
}

fn downsample_2x2(p: &Plane) -> Plane {
    let mut out = Plane::new(p.width / 2, p.height / 2);
    for y in 0..out.height {
        for x in 0..out.width {
            let s = u32::from(p.at(2 * x, 2 * y))
                + u32::from(p.at(2 * x + 1, 2 * y))
                + u32::from(p.at(2 * x, 2 * y + 1))
                + u32::from(p.at(2 * x + 1, 2 * y + 1));
            out.data[y * out.width + x] = ((s + 2) / 4) as u8;
        }
    }
    out
}

fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> (u8, u8, u8) {
    let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = -0.168_735_892 * r - 0.331_264_108 * g + 0.5 * b + 128.0;
    let cr = 0.5 * r - 0.418_687_589 * g - 0.081_312_411 * b + 128.0;
    (clamp_u8(y), clamp_u8(cb), clamp_u8(cr))
}

fn ycbcr_to_rgb(y: u8, cb: u8, cr: u8) -> (u8, u8, u8) {
    let y = f64::from(y);
    let cb = f64::from(cb) - 128.0;
    let cr = f64::from(cr) - 128.0;
    let r = y + 1.402 * cr;
    let g = y - 0.344_136_286 * cb - 0.714_136_286 * cr;
    let b = y + 1.772 * cb;
    (clamp_u8(r), clamp_u8(g), clamp_u8(b))
}

/// Lowest quality written with full-resolution chroma.
pub const FULL_CHROMA_QUALITY: u8 = 90;

pub fn check_quality(quality: u8) -> Result<()> {
    if (1..=100).contains(&quality) {
        Ok(())
    } else {
        Err(Error::InvalidQuality(quality))
    }
}

/// Encode `image` as a baseline JFIF stream.
pub fn encode(image: &RawImage, quality: u8) -> Result<Vec<u8>> {
    check_quality(quality)?;
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let px = image.pixels();
    let luma_q = luma_table(quality);
    let chroma_q = chroma_table(quality);
    // luma samples per chroma sample along each axis
    let f = if quality < FULL_CHROMA_QUALITY { 2 } else { 1 };

    let mut out = Vec::with_capacity(1024 + w * h);
    out.extend_from_slice(&[0xFF, 0xD8]);
    // APP0 / JFIF 1.01, no thumbnail
    out.extend_from_slice(&[0xFF, 0xE0, 0x00, 0x10, b'J', b'F', b'I', b'F', 0x00, 0x01, 0x01, 0x00]);
    out.extend_from_slice(&[0x00, 0x01, 0x00, 0x01, 0x00, 0x00]);
    write_dqt(&mut out, 0, &luma_q);
    if ch == 3 {
        write_dqt(&mut out, 1, &chroma_q);
    }

    // SOF0
    out.extend_from_slice(&[0xFF, 0xC0]);
    push_u16(&mut out, (8 + 3 * ch) as u16);
    out.push(8);
    push_u16(&mut out, h as u16);
    push_u16(&mut out, w as u16);
    out.push(ch as u8);
    if ch == 3 {
        out.extend_from_slice(&[1, (f * 0x11) as u8, 0, 2, 0x11, 1, 3, 0x11, 1]);
    } else {
        out.extend_from_slice(&[1, 0x11, 0]);
    }

    write_dht(&mut out, 0x00, &DC_LUMA_BITS, &DC_VALUES);
    write_dht(&mut out, 0x10, &AC_LUMA_BITS, &AC_LUMA_VALUES);
    if ch == 3 {
        write_dht(&mut out, 0x01, &DC_CHROMA_BITS, &DC_VALUES);
        write_dht(&mut out, 0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALUES);
    }

    // SOS
    out.extend_from_slice(&[0xFF, 0xDA]);
    push_u16(&mut out, (6 + 2 * ch) as u16);
    out.push(ch as u8);
    if ch == 3 {
        out.extend_from_slice(&[1, 0x00, 2, 0x11, 3, 0x11]);
    } else {
        out.extend_from_slice(&[1, 0x00]);
    }
    out.extend_from_slice(&[0, 63, 0]);

    let dc_l = HuffEncoder::new(&DC_LUMA_BITS, &DC_VALUES);
    let ac_l = HuffEncoder::new(&AC_LUMA_BITS, &AC_LUMA_VALUES);
    let mut bw = BitWriter::new(out);

    if ch == 1 {
        let pw = w.div_ceil(8) * 8;
        let ph = h.div_ceil(8) * 8;
        let plane = padded_plane(w, h, pw, ph, |x, y| px[y * w + x]);
        let mut pred = 0;
        for by in 0..ph / 8 {
            for bx in 0..pw / 8 {
                let q = quantize(&plane.block(bx, by), &luma_q);
                encode_block(&mut bw, &q, &mut pred, &dc_l, &ac_l);
            }
        }
    } else {
        let dc_c = HuffEncoder::new(&DC_CHROMA_BITS, &DC_VALUES);
        let ac_c = HuffEncoder::new(&AC_CHROMA_BITS, &AC_CHROMA_VALUES);
        let mcu = 8 * f;
        let pw = w.div_ceil(mcu) * mcu;
        let ph = h.div_ceil(mcu) * mcu;
        let mut ycc = vec![(0u8, 0u8, 0u8); w * h];
        for (i, v) in ycc.iter_mut().enumerate() {
            *v = rgb_to_ycbcr(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
        }
        let y_plane = padded_plane(w, h, pw, ph, |x, y| ycc[y * w + x].0);
        let chroma = |k: usize| {
            let p = padded_plane(w, h, pw, ph, |x, y| {
                let v = ycc[y * w + x];
                if k == 1 {
                    v.1
                } else {
                    v.2
                }
            });
            if f == 2 {
                downsample_2x2(&p)
            } else {
                p
            }
        };
        let (cb_plane, cr_plane) = (chroma(1), chroma(2));
        let (mut py, mut pcb, mut pcr) = (0, 0, 0);
        for my in 0..ph / mcu {
            for mx in 0..pw / mcu {
                for dy in 0..f {
                    for dx in 0..f {
                        let q = quantize(&y_plane.block(f * mx + dx, f * my + dy), &luma_q);
                        encode_block(&mut bw, &q, &mut py, &dc_l, &ac_l);
                    }
                }
                let q = quantize(&cb_plane.block(mx, my), &chroma_q);
                encode_block(&mut bw, &q, &mut pcb, &dc_c, &ac_c);
                let q = quantize(&cr_plane.block(mx, my), &chroma_q);
                encode_block(&mut bw, &q, &mut pcr, &dc_c, &ac_c);
            }
        }
    }

    let mut out = bw.finish();
    out.extend_from_slice(&[0xFF, 0xD9]);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoder

struct Component {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    td: usize,
    ta: usize,
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
    /// Set once a marker is hit; further reads return zero bits.
    marker_hit: bool,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], pos: usize) -> Self {
        BitReader {
            data,
            pos,
            acc: 0,
            nbits: 0,
            marker_hit: false,
        }
    }

    fn fill(&mut self) -> Result<()> {
        while self.nbits <= 24 {
            let byte = if self.marker_hit {
                0
            } else {
                let b = *self
                    .data
                    .get(self.pos)
                    .ok_or_else(|| Error::Parse("truncated entropy-coded data".into()))?;
                if b == 0xFF {
                    let next = *self
                        .data
                        .get(self.pos + 1)
                        .ok_or_else(|| Error::Parse("truncated entropy-coded data".into()))?;
                    if next == 0x00 {
                        self.pos += 2;
                        0xFF
                    } else {
                        self.marker_hit = true;
                        0
                    }
                } else {
                    self.pos += 1;
                    b
                }
            };
            self.acc |= u32::from(byte) << (24 - self.nbits);
            self.nbits += 8;
        }
        Ok(())
    }

    fn bit(&mut self) -> Result<u32> {
        if self.nbits == 0 {
            self.fill()?;
        }
        let b = self.acc >> 31;
        self.acc <<= 1;
        self.nbits -= 1;
        Ok(b)
    }

    fn bits(&mut self, n: u8) -> Result<u32> {
        if n == 0 {
            return Ok(0);
        }
        if self.nbits < u32::from(n) {
            self.fill()?;
        }
        let v = self.acc >> (32 - u32::from(n));
        self.acc <<= n;
        self.nbits -= u32::from(n);
        Ok(v)
    }

    fn decode(&mut self, table: &HuffDecoder) -> Result<u8> {
        let mut code: i32 = 0;
        for len in 1..=16 {
            code = (code << 1) | self.bit()? as i32;
            if code <= table.max_code[len] {
                let idx = (code + table.offset[len]) as usize;
                return table
                    .values
                    .get(idx)
                    .copied()
                    .ok_or_else(|| Error::Parse("bad Huffman code".into()));
            }
        }
        Err(Error::Parse("bad Huffman code".into()))
    }

    fn receive_extend(&mut self, cat: u8) -> Result<i32> {
        if cat == 0 {
            return Ok(0);
        }
        if cat > 15 {
            return Err(Error::Parse("coefficient magnitude out of range".into()));
        }
        let v = self.bits(cat)? as i32;
        Ok(if v < (1 << (cat - 1)) {
            v - (1 << cat) + 1
        } else {
            v
        })
    }

    /// Discard buffered bits and consume an RSTn marker.
    fn restart(&mut self) -> Result<()> {
        self.acc = 0;
        self.nbits = 0;
        self.marker_hit = false;
        match self.data.get(self.pos..self.pos + 2) {
            Some([0xFF, m]) if (0xD0..=0xD7).contains(m) => {
                self.pos += 2;
                Ok(())
            }
            _ => Err(Error::Parse("expected restart marker".into())),
        }
    }
}

fn read_u16(data: &[u8], pos: usize) -> Result<usize> {
    data.get(pos..pos + 2)
        .map(|b| usize::from(u16::from_be_bytes([b[0], b[1]])))
        .ok_or_else(|| Error::Parse("truncated marker segment".into()))
}

/// Decode a baseline JPEG stream into interleaved 8-bit samples.
pub fn decode(data: &[u8]) -> Result<RawImage> {
    if data.get(0..2) != Some(&[0xFF, 0xD8]) {
        return Err(Error::Parse("missing SOI marker".into()));
    }
    let mut pos = 2;
    let mut qtables: [Option<[u16; 64]>; 4] = [None; 4];
    let mut dc_tables: [Option<HuffDecoder>; 4] = [None, None, None, None];
    let mut ac_tables: [Option<HuffDecoder>; 4] = [None, None, None, None];
    let mut frame: Option<(usize, usize, Vec<Component>)> = None;
    let mut restart_interval = 0usize;

    loop {
        let marker = match data.get(pos..pos + 2) {
            Some([0xFF, m]) => *m,
            _ => return Err(Error::Parse("expected marker".into())),
        };
        pos += 2;
        if marker == 0xFF {
            // fill byte
            pos -= 1;
            continue;
        }
        if marker == 0xD9 {
            return Err(Error::Parse("EOI before scan".into()));
        }
        let len = read_u16(data, pos)?;
        if len < 2 {
            return Err(Error::Parse("bad segment length".into()));
        }
        let seg = data
            .get(pos + 2..pos + len)
            .ok_or_else(|| Error::Parse("truncated marker segment".into()))?;
        match marker {
            0xDB => {
                let mut s = seg;
                while !s.is_empty() {
                    let pq = s[0] >> 4;
                    let tq = (s[0] & 0x0F) as usize;
                    if tq > 3 {
                        return Err(Error::Parse("bad quantization table id".into()));
                    }
                    let size = if pq == 0 { 64 } else { 128 };
                    let body = s
                        .get(1..1 + size)
                        .ok_or_else(|| Error::Parse("truncated DQT".into()))?;
                    let mut t = [0u16; 64];
                    for k in 0..64 {
                        t[ZIGZAG[k]] = if pq == 0 {
                            u16::from(body[k])
                        } else {
                            u16::from_be_bytes([body[2 * k], body[2 * k + 1]])
                        };
                    }
                    qtables[tq] = Some(t);
                    s = &s[1 + size..];
                }
            }
            0xC4 => {
                let mut s = seg;
                while !s.is_empty() {
                    if s.len() < 17 {
                        return Err(Error::Parse("truncated DHT".into()));
                    }
                    let class = s[0] >> 4;
                    let id = (s[0] & 0x0F) as usize;
                    if id > 3 || class > 1 {
                        return Err(Error::Parse("bad Huffman table id".into()));
                    }
                    let mut bits = [0u8; 16];
                    bits.copy_from_slice(&s[1..17]);
                    let total: usize = bits.iter().map(|&b| b as usize).sum();
                    let values = s
                        .get(17..17 + total)
                        .ok_or_else(|| Error::Parse("truncated DHT".into()))?
                        .to_vec();
                    let table = HuffDecoder::new(&bits, values)?;
                    if class == 0 {
                        dc_tables[id] = Some(table);
                    } else {
                        ac_tables[id] = Some(table);
                    }
                    s = &s[17 + total..];
                }
            }
            0xC0 | 0xC1 => {
                if seg.len() < 6 || seg[0] != 8 {
                    return Err(Error::Parse("only 8-bit baseline frames are supported".into()));
                }
                let height = usize::from(u16::from_be_bytes([seg[1], seg[2]]));
                let width = usize::from(u16::from_be_bytes([seg[3], seg[4]]));
                let n = usize::from(seg[5]);
                if !(n == 1 || n == 3) || seg.len() < 6 + 3 * n || width == 0 || height == 0 {
                    return Err(Error::Parse("unsupported frame header".into()));
                }
                let comps = (0..n)
                    .map(|i| {
                        let c = &seg[6 + 3 * i..9 + 3 * i];
                        Component {
                            id: c[0],
                            h: usize::from(c[1] >> 4),
                            v: usize::from(c[1] & 0x0F),
                            tq: usize::from(c[2] & 0x03),
                            td: 0,
                            ta: 0,
                        }
                    })
                    .collect::<Vec<_>>();
                if comps.iter().any(|c| !(1..=2).contains(&c.h) || !(1..=2).contains(&c.v)) {
                    return Err(Error::Parse("unsupported sampling factors".into()));
                }
                frame = Some((width, height, comps));
            }
            0xC2..=0xCF if marker != 0xC4 && marker != 0xC8 && marker != 0xCC => {
                return Err(Error::Parse("only baseline sequential JPEG is supported".into()));
            }
            0xDD => {
                restart_interval = read_u16(seg, 0)?;
            }
            0xDA => {
                let (width, height, mut comps) =
                    frame.ok_or_else(|| Error::Parse("scan before frame header".into()))?;
                let ns = usize::from(*seg.first().ok_or_else(|| Error::Parse("bad SOS".into()))?);
                if ns != comps.len() || seg.len() < 1 + 2 * ns + 3 {
                    return Err(Error::Parse("only single interleaved scans are supported".into()));
                }
                for i in 0..ns {
                    let cid = seg[1 + 2 * i];
                    let sel = seg[2 + 2 * i];
                    let comp = comps
                        .iter_mut()
                        .find(|c| c.id == cid)
                        .ok_or_else(|| Error::Parse("scan references unknown component".into()))?;
                    comp.td = usize::from(sel >> 4) & 3;
                    comp.ta = usize::from(sel & 0x0F) & 3;
                }
                let scan = DecodeCtx {
                    width,
                    height,
                    comps: &comps,
                    qtables: &qtables,
                    dc_tables: &dc_tables,
                    ac_tables: &ac_tables,
                    restart_interval,
                };
                return scan.run(data, pos + len);
            }
            _ => {}
        }
        pos += len;
    }
}

struct DecodeCtx<'a> {
    width: usize,
    height: usize,
    comps: &'a [Component],
    qtables: &'a [Option<[u16; 64]>; 4],
    dc_tables: &'a [Option<HuffDecoder>; 4],
    ac_tables: &'a [Option<HuffDecoder>; 4],
    restart_interval: usize,
}

impl DecodeCtx<'_> {
    fn run(&self, data: &[u8], start: usize) -> Result<RawImage> {
        let hmax = self.comps.iter().map(|c| c.h).max().unwrap_or(1);
        let vmax = self.comps.iter().map(|c| c.v).max().unwrap_or(1);
        let single = self.comps.len() == 1;
        let (mcu_w, mcu_h) = if single { (8, 8) } else { (8 * hmax, 8 * vmax) };
        let mcus_x = self.width.div_ceil(mcu_w);
        let mcus_y = self.height.div_ceil(mcu_h);

        let mut planes = Vec::with_capacity(self.comps.len());
        let mut tables = Vec::with_capacity(self.comps.len());
        for c in self.comps {
            let (bw, bh) = if single { (1, 1) } else { (c.h, c.v) };
            planes.push(Plane::new(mcus_x * bw * 8, mcus_y * bh * 8));
            let q = self.qtables[c.tq].ok_or_else(|| Error::Parse("missing quantization table".into()))?;
            let dc = self.dc_tables[c.td]
                .as_ref()
                .ok_or_else(|| Error::Parse("missing DC Huffman table".into()))?;
            let ac = self.ac_tables[c.ta]
                .as_ref()
                .ok_or_else(|| Error::Parse("missing AC Huffman table".into()))?;
            tables.push((q, dc, ac, bw, bh));
        }

        let mut reader = BitReader::new(data, start);
        let mut preds = vec![0i32; self.comps.len()];
        let total = mcus_x * mcus_y;
        for mcu in 0..total {
            if self.restart_interval > 0 && mcu > 0 && mcu % self.restart_interval == 0 {
                reader.restart()?;
                preds.iter_mut().for_each(|p| *p = 0);
            }
            let (mx, my) = (mcu % mcus_x, mcu / mcus_x);
            for (ci, (q, dc, ac, bw, bh)) in tables.iter().enumerate() {
                for by in 0..*bh {
                    for bx in 0..*bw {
                        let mut coef = [0.0f64; 64];
                        let cat = reader.decode(dc)?;
                        preds[ci] += reader.receive_extend(cat)?;
                        coef[0] = f64::from(preds[ci]) * f64::from(q[0]);
                        let mut k = 1;
                        while k < 64 {
                            let rs = reader.decode(ac)?;
                            let (run, size) = (usize::from(rs >> 4), rs & 0x0F);
                            if size == 0 {
                                if run == 15 {
                                    k += 16;
                                    continue;
                                }
                                break;
                            }
                            k += run;
                            if k > 63 {
                                return Err(Error::Parse("AC coefficient index out of range".into()));
                            }
                            let nat = ZIGZAG[k];
                            coef[nat] = f64::from(reader.receive_extend(size)?) * f64::from(q[nat]);
                            k += 1;
                        }
                        planes[ci].put_block(mx * bw + bx, my * bh + by, &idct(&coef));
                    }
                }
            }
        }

        let (w, h) = (self.width, self.height);
        if single {
            let p = &planes[0];
            let mut px = Vec::with_capacity(w * h);
            for y in 0..h {
                px.extend_from_slice(&p.data[y * p.width..y * p.width + w]);
            }
            return RawImage::new(w, h, 1, px);
        }
        let sample = |ci: usize, x: usize, y: usize| -> u8 {
            let c = &self.comps[ci];
            planes[ci].at(x * c.h / hmax, y * c.v / vmax)
        };
        let mut px = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = ycbcr_to_rgb(sample(0, x, y), sample(1, x, y), sample(2, x, y));
                px.extend_from_slice(&[r, g, b]);
            }
        }
        RawImage::new(w, h, 3, px)
    }
}

/// `decode(encode(image, quality))`.
pub fn roundtrip(image: &RawImage, quality: u8) -> Result<RawImage> {
    let bytes = encode(image, quality)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_scaling_matches_libjpeg_formula() {
        // q=50 leaves the base table untouched
        assert_eq!(luma_table(50), LUMA_QUANT);
        // q=100 collapses everything to 1
        assert!(luma_table(100).iter().all(|&v| v == 1));
        // q=10: scale 500, 16 -> (16*500+50)/100 = 80
        assert_eq!(luma_table(10)[0], 80);
        // clamped to 255 at very low quality
        assert_eq!(chroma_table(1)[63], 255);
    }

    #[test]
    fn dct_pair_is_inverse() {
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 255) as f64 - 128.0;
        }
        let back = idct(&fdct(&block));
        for (a, b) in block.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn magnitude_coding() {
        assert_eq!(magnitude_category(0), 0);
        assert_eq!(magnitude_category(-1), 1);
        assert_eq!(magnitude_category(255), 8);
        assert_eq!(magnitude_bits(-1, 1), 0);
        assert_eq!(magnitude_bits(-3, 2), 0);
        assert_eq!(magnitude_bits(3, 2), 3);
    }

    #[test]
    fn rejects_bad_quality_and_tiny_images() {
        let img = RawImage::new(8, 8, 1, vec![0; 64]).unwrap();
        assert!(matches!(encode(&img, 0), Err(Error::InvalidQuality(0))));
        assert!(matches!(encode(&img, 101), Err(Error::InvalidQuality(101))));
        assert!(matches!(RawImage::new(4, 8, 1, vec![0; 32]), Err(Error::InvalidImage(_))));
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let img = RawImage::new(16, 16, 3, (0..768).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
        let bytes = encode(&img, 75).unwrap();
        assert!(decode(&bytes[..bytes.len() / 2]).is_err());
        assert!(decode(&bytes[2..]).is_err());
    }
}
