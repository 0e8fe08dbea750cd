//! Baseline sequential encoder, 4:2:0, standard Huffman tables.

use super::dct;
use super::tables::*;
use super::{JpegError, RgbImage};

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    n: u32,
}

impl BitWriter {
    fn put(&mut self, code: u16, len: u8) {
        self.acc = (self.acc << len) | u32::from(code);
        self.n += u32::from(len);
        while self.n >= 8 {
            let b = (self.acc >> (self.n - 8)) as u8;
            self.out.push(b);
            if b == 0xff {
                self.out.push(0);
            }
            self.n -= 8;
        }
        self.acc &= (1 << self.n) - 1;
    }

    fn flush(&mut self) {
        if self.n > 0 {
            let pad = 8 - self.n as u8;
            self.put((1 << pad) - 1, pad);
        }
    }
}

/// Bit count of `|v|` and the JPEG amplitude bits for `v`.
fn magnitude(v: i32) -> (u8, u16) {
    let size = (32 - v.unsigned_abs().leading_zeros()) as u8;
    let bits = if v < 0 { v - 1 } else { v };
    (size, (bits as u32 & ((1u32 << size) - 1)) as u16)
}

struct Tables {
    dc: [EncodeTable; 2],
    ac: [EncodeTable; 2],
}

fn standard_tables() -> Tables {
    let t = |b, v: &[u8]| EncodeTable::new(b, v).expect("standard table");
    Tables {
        dc: [t(&DC_LUMA_BITS, &DC_VALUES), t(&DC_CHROMA_BITS, &DC_VALUES)],
        ac: [t(&AC_LUMA_BITS, &AC_LUMA_VALUES), t(&AC_CHROMA_BITS, &AC_CHROMA_VALUES)],
    }
}

fn encode_block(
    w: &mut BitWriter,
    samples: &[f64; 64],
    quant: &[u16; 64],
    prev_dc: &mut i32,
    dc: &EncodeTable,
    ac: &EncodeTable,
) {
    let coef = dct::forward(samples);
    let mut zz = [0i32; 64];
    for (k, &n) in ZIGZAG.iter().enumerate() {
        zz[k] = ((coef[n] / f64::from(quant[n])).round() as i32).clamp(-1023, 1023);
    }
    let diff = zz[0] - *prev_dc;
    *prev_dc = zz[0];
    let (size, bits) = magnitude(diff);
    let (c, l) = dc.get(size);
    w.put(c, l);
    if size > 0 {
        w.put(bits, size);
    }
    let mut run = 0u8;
    for &v in &zz[1..] {
        if v == 0 {
            run += 1;
            continue;
        }
        while run >= 16 {
            let (c, l) = ac.get(0xf0);
            w.put(c, l);
            run -= 16;
        }
        let (size, bits) = magnitude(v);
        let (c, l) = ac.get(run << 4 | size);
        w.put(c, l);
        w.put(bits, size);
        run = 0;
    }
    if run > 0 {
        let (c, l) = ac.get(0x00);
        w.put(c, l);
    }
}

fn segment(out: &mut Vec<u8>, marker: u8, body: &[u8]) {
    out.extend_from_slice(&[0xff, marker]);
    out.extend_from_slice(&((body.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(body);
}

fn headers(out: &mut Vec<u8>, width: u16, height: u16, q: &QuantTables) {
    out.extend_from_slice(&[0xff, 0xd8]);
    segment(out, 0xe0, &[b'J', b'F', b'I', b'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0]);
    let mut dqt = Vec::with_capacity(130);
    for (id, table) in [(0u8, &q.luma), (1, &q.chroma)] {
        dqt.push(id);
        dqt.extend(ZIGZAG.iter().map(|&n| table[n] as u8));
    }
    segment(out, 0xdb, &dqt);
    let mut sof = vec![8];
    sof.extend_from_slice(&height.to_be_bytes());
    sof.extend_from_slice(&width.to_be_bytes());
    sof.extend_from_slice(&[3, 1, 0x22, 0, 2, 0x11, 1, 3, 0x11, 1]);
    segment(out, 0xc0, &sof);
    let mut dht = Vec::new();
    for (class_id, bits, vals) in [
        (0x00u8, &DC_LUMA_BITS, &DC_VALUES[..]),
        (0x10, &AC_LUMA_BITS, &AC_LUMA_VALUES[..]),
        (0x01, &DC_CHROMA_BITS, &DC_VALUES[..]),
        (0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALUES[..]),
    ] {
        dht.push(class_id);
        dht.extend_from_slice(bits);
        dht.extend_from_slice(vals);
    }
    segment(out, 0xc4, &dht);
    segment(out, 0xda, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);
}

pub fn encode(img: &RgbImage, q: u8) -> Result<Vec<u8>, JpegError> {
    let tables = quality_to_tables(q)?;
    let (w, h) = (img.width(), img.height());
    let (w16, h16) = (u16::try_from(w), u16::try_from(h));
    let (Ok(w16 @ 1..), Ok(h16 @ 1..)) = (w16, h16) else {
        return Err(JpegError::Dimensions { width: w, height: h });
    };
    // MCU-aligned planes with edge replication
    let (pw, ph) = (w.div_ceil(16) * 16, h.div_ceil(16) * 16);
    let mut planes = [vec![0.0f64; pw * ph], vec![0.0; pw * ph], vec![0.0; pw * ph]];
    for y in 0..ph {
        for x in 0..pw {
            let [r, g, b] = img.pixel(x.min(w - 1), y.min(h - 1)).map(f64::from);
            let i = y * pw + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
        }
    }
    let (cw, ch) = (pw / 2, ph / 2);
    let sub = |p: &[f64]| {
        let mut o = vec![0.0; cw * ch];
        for y in 0..ch {
            for x in 0..cw {
                let i = 2 * y * pw + 2 * x;
                o[y * cw + x] = 0.25 * (p[i] + p[i + 1] + p[i + pw] + p[i + pw + 1]);
            }
        }
        o
    };
    let cb = sub(&planes[1]);
    let cr = sub(&planes[2]);

    let mut out = Vec::with_capacity(1024);
    headers(&mut out, w16, h16, &tables);
    let huff = standard_tables();
    let mut bw = BitWriter { out, acc: 0, n: 0 };
    let mut dc = [0i32; 3];
    let block = |plane: &[f64], stride: usize, bx: usize, by: usize| {
        let mut s = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                s[y * 8 + x] = plane[(by + y) * stride + bx + x] - 128.0;
            }
        }
        s
    };
    for my in 0..ph / 16 {
        for mx in 0..pw / 16 {
            for (dy, dx) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
                let s = block(&planes[0], pw, mx * 16 + dx, my * 16 + dy);
                encode_block(&mut bw, &s, &tables.luma, &mut dc[0], &huff.dc[0], &huff.ac[0]);
            }
            for (c, plane) in [(1, &cb), (2, &cr)] {
                let s = block(plane, cw, mx * 8, my * 8);
                encode_block(&mut bw, &s, &tables.chroma, &mut dc[c], &huff.dc[1], &huff.ac[1]);
            }
        }
    }
    bw.flush();
    let mut out = bw.out;
    out.extend_from_slice(&[0xff, 0xd9]);
    Ok(out)
}
