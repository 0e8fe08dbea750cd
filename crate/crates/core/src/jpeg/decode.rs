//! Baseline sequential decoder.
//!
//! Accepts the streams written by the encoder plus nearby variants (grayscale,
//! other sampling factors up to 2, 16-bit quantizers). Every malformed input
//! maps to an error; nothing here panics on hostile bytes.

use super::dct;
use super::tables::{DecodeTable, ZIGZAG};
use super::{JpegError, RgbImage, MAX_PIXELS};

#[derive(Clone, Copy, Debug)]
struct Component {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    td: usize,
    ta: usize,
}

struct Frame {
    width: usize,
    height: usize,
    comps: Vec<Component>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, JpegError> {
        let b = *self.data.get(self.pos).ok_or(JpegError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, JpegError> {
        Ok(u16::from(self.u8()?) << 8 | u16::from(self.u8()?))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], JpegError> {
        let end = self.pos.checked_add(n).ok_or(JpegError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(JpegError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn segment(&mut self) -> Result<&'a [u8], JpegError> {
        let len = usize::from(self.u16()?);
        if len < 2 {
            return Err(JpegError::Malformed("segment length below 2"));
        }
        self.take(len - 2)
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    n: u32,
}

impl BitReader<'_> {
    fn bit(&mut self) -> Result<u32, JpegError> {
        if self.n == 0 {
            let b = *self.data.get(self.pos).ok_or(JpegError::Truncated)?;
            self.pos += 1;
            if b == 0xff {
                match self.data.get(self.pos) {
                    Some(0) => self.pos += 1,
                    // a marker inside the scan means the entropy data ran out
                    _ => return Err(JpegError::Truncated),
                }
            }
            self.acc = u32::from(b);
            self.n = 8;
        }
        self.n -= 1;
        Ok((self.acc >> self.n) & 1)
    }

    fn bits(&mut self, count: u8) -> Result<u32, JpegError> {
        let mut v = 0;
        for _ in 0..count {
            v = v << 1 | self.bit()?;
        }
        Ok(v)
    }

    fn symbol(&mut self, t: &DecodeTable) -> Result<u8, JpegError> {
        let mut code = 0i32;
        for len in 1..=16 {
            code = code << 1 | self.bit()? as i32;
            if let Some(s) = t.lookup(code, len) {
                return Ok(s);
            }
        }
        Err(JpegError::Huffman("no symbol matches the code"))
    }

    fn receive_extend(&mut self, size: u8) -> Result<i32, JpegError> {
        if size == 0 {
            return Ok(0);
        }
        let v = self.bits(size)? as i32;
        Ok(if v < 1 << (size - 1) { v - (1 << size) + 1 } else { v })
    }
}

fn parse_frame(body: &[u8]) -> Result<Frame, JpegError> {
    let mut r = Reader { data: body, pos: 0 };
    if r.u8()? != 8 {
        return Err(JpegError::Unsupported("sample precision other than 8"));
    }
    let height = usize::from(r.u16()?);
    let width = usize::from(r.u16()?);
    if width == 0 || height == 0 || width * height > MAX_PIXELS {
        return Err(JpegError::Dimensions { width, height });
    }
    let n = usize::from(r.u8()?);
    if n != 1 && n != 3 {
        return Err(JpegError::Unsupported("component count other than 1 or 3"));
    }
    let mut comps = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u8()?;
        let hv = r.u8()?;
        let tq = usize::from(r.u8()?);
        let (h, v) = (usize::from(hv >> 4), usize::from(hv & 15));
        if !(1..=2).contains(&h) || !(1..=2).contains(&v) || tq > 3 {
            return Err(JpegError::Unsupported("sampling factor or table id"));
        }
        if comps.iter().any(|c: &Component| c.id == id) {
            return Err(JpegError::Malformed("duplicate component id"));
        }
        comps.push(Component { id, h, v, tq, td: 0, ta: 0 });
    }
    if r.pos != body.len() {
        return Err(JpegError::Malformed("frame header length"));
    }
    Ok(Frame { width, height, comps })
}

fn parse_dqt(body: &[u8], quant: &mut [Option<[u16; 64]>; 4]) -> Result<(), JpegError> {
    let mut r = Reader { data: body, pos: 0 };
    while r.pos < body.len() {
        let pq = r.u8()?;
        let (precision, id) = (pq >> 4, usize::from(pq & 15));
        if id > 3 || precision > 1 {
            return Err(JpegError::Malformed("quantization table id"));
        }
        let mut t = [0u16; 64];
        for &n in &ZIGZAG {
            t[n] = if precision == 0 { u16::from(r.u8()?) } else { r.u16()? };
        }
        quant[id] = Some(t);
    }
    Ok(())
}

fn parse_dht(
    body: &[u8],
    dc: &mut [Option<DecodeTable>; 4],
    ac: &mut [Option<DecodeTable>; 4],
) -> Result<(), JpegError> {
    let mut r = Reader { data: body, pos: 0 };
    while r.pos < body.len() {
        let tc = r.u8()?;
        let (class, id) = (tc >> 4, usize::from(tc & 15));
        if class > 1 || id > 3 {
            return Err(JpegError::Malformed("huffman table id"));
        }
        let mut bits = [0u8; 16];
        bits.copy_from_slice(r.take(16)?);
        let total = bits.iter().map(|&b| usize::from(b)).sum();
        let table = DecodeTable::new(&bits, r.take(total)?)?;
        if class == 0 {
            dc[id] = Some(table);
        } else {
            ac[id] = Some(table);
        }
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage, JpegError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.u16()? != 0xffd8 {
        return Err(JpegError::Malformed("missing start-of-image"));
    }
    let mut quant: [Option<[u16; 64]>; 4] = [None; 4];
    let mut dc: [Option<DecodeTable>; 4] = Default::default();
    let mut ac: [Option<DecodeTable>; 4] = Default::default();
    let mut frame: Option<Frame> = None;
    loop {
        if r.u8()? != 0xff {
            return Err(JpegError::Malformed("expected a marker"));
        }
        let mut marker = r.u8()?;
        while marker == 0xff {
            marker = r.u8()?;
        }
        match marker {
            0xc0 | 0xc1 => {
                if frame.is_some() {
                    return Err(JpegError::Malformed("second frame header"));
                }
                frame = Some(parse_frame(r.segment()?)?);
            }
            0xc2 | 0xc3 | 0xc5..=0xc7 | 0xc9..=0xcb | 0xcd..=0xcf => {
                return Err(JpegError::Unsupported("non-baseline coding process"));
            }
            0xc4 => parse_dht(r.segment()?, &mut dc, &mut ac)?,
            0xdb => parse_dqt(r.segment()?, &mut quant)?,
            0xdd => {
                let body = r.segment()?;
                if body.len() != 2 {
                    return Err(JpegError::Malformed("restart interval length"));
                }
                if body != [0, 0] {
                    return Err(JpegError::Unsupported("restart intervals"));
                }
            }
            0xda => {
                let frame = frame.as_mut().ok_or(JpegError::Malformed("scan before frame"))?;
                let header = r.segment()?;
                parse_scan_header(header, frame)?;
                let scan = &bytes[r.pos..];
                return decode_scan(frame, scan, &quant, &dc, &ac);
            }
            0xd9 => return Err(JpegError::Malformed("end-of-image before any scan")),
            0xd8 | 0xd0..=0xd7 | 0x01 => {
                return Err(JpegError::Malformed("unexpected standalone marker"));
            }
            _ => {
                r.segment()?;
            }
        }
    }
}

fn parse_scan_header(body: &[u8], frame: &mut Frame) -> Result<(), JpegError> {
    let mut r = Reader { data: body, pos: 0 };
    let n = usize::from(r.u8()?);
    if n != frame.comps.len() {
        return Err(JpegError::Unsupported("scan must carry every component"));
    }
    for i in 0..n {
        let id = r.u8()?;
        let t = r.u8()?;
        let c = &mut frame.comps[i];
        if c.id != id {
            return Err(JpegError::Malformed("scan component order"));
        }
        c.td = usize::from(t >> 4);
        c.ta = usize::from(t & 15);
        if c.td > 3 || c.ta > 3 {
            return Err(JpegError::Malformed("huffman table selector"));
        }
    }
    let (ss, se, a) = (r.u8()?, r.u8()?, r.u8()?);
    if ss != 0 || se != 63 || a != 0 || r.pos != body.len() {
        return Err(JpegError::Unsupported("spectral selection or approximation"));
    }
    Ok(())
}

fn decode_scan(
    frame: &Frame,
    scan: &[u8],
    quant: &[Option<[u16; 64]>; 4],
    dc: &[Option<DecodeTable>; 4],
    ac: &[Option<DecodeTable>; 4],
) -> Result<RgbImage, JpegError> {
    let hmax = frame.comps.iter().map(|c| c.h).max().unwrap_or(1);
    let vmax = frame.comps.iter().map(|c| c.v).max().unwrap_or(1);
    let single = frame.comps.len() == 1;
    // a lone component is coded block by block regardless of its factors
    let (mcu_w, mcu_h) = if single { (8, 8) } else { (8 * hmax, 8 * vmax) };
    let (mx_count, my_count) = (frame.width.div_ceil(mcu_w), frame.height.div_ceil(mcu_h));

    struct Plane<'t> {
        data: Vec<f64>,
        stride: usize,
        quant: &'t [u16; 64],
        dc: &'t DecodeTable,
        ac: &'t DecodeTable,
        pred: i32,
    }
    let mut planes = Vec::with_capacity(frame.comps.len());
    for c in &frame.comps {
        let (bh, bv) = if single { (1, 1) } else { (c.h, c.v) };
        let stride = mx_count * bh * 8;
        let rows = my_count * bv * 8;
        planes.push(Plane {
            data: vec![0.0; stride * rows],
            stride,
            quant: quant[c.tq].as_ref().ok_or(JpegError::Malformed("missing quantization table"))?,
            dc: dc[c.td].as_ref().ok_or(JpegError::Malformed("missing DC table"))?,
            ac: ac[c.ta].as_ref().ok_or(JpegError::Malformed("missing AC table"))?,
            pred: 0,
        });
    }

    let mut br = BitReader { data: scan, pos: 0, acc: 0, n: 0 };
    for my in 0..my_count {
        for mx in 0..mx_count {
            for (c, p) in frame.comps.iter().zip(planes.iter_mut()) {
                let (bh, bv) = if single { (1, 1) } else { (c.h, c.v) };
                for by in 0..bv {
                    for bx in 0..bh {
                        let mut coef = [0.0f64; 64];
                        let size = br.symbol(p.dc)?;
                        if size > 11 {
                            return Err(JpegError::Huffman("DC magnitude category"));
                        }
                        p.pred = p.pred.wrapping_add(br.receive_extend(size)?);
                        coef[0] = f64::from(p.pred) * f64::from(p.quant[0]);
                        let mut k = 1;
                        while k < 64 {
                            let rs = br.symbol(p.ac)?;
                            let (run, size) = (usize::from(rs >> 4), rs & 15);
                            if size == 0 {
                                if run == 15 {
                                    k += 16;
                                    continue;
                                }
                                break;
                            }
                            k += run;
                            if k > 63 || size > 10 {
                                return Err(JpegError::Huffman("AC run past block end"));
                            }
                            let n = ZIGZAG[k];
                            coef[n] = f64::from(br.receive_extend(size)?) * f64::from(p.quant[n]);
                            k += 1;
                        }
                        if k > 64 {
                            return Err(JpegError::Huffman("zero run past block end"));
                        }
                        let px = dct::inverse(&coef);
                        let x0 = (mx * bh + bx) * 8;
                        let y0 = (my * bv + by) * 8;
                        for y in 0..8 {
                            let row = (y0 + y) * p.stride + x0;
                            for x in 0..8 {
                                p.data[row + x] = px[y * 8 + x] + 128.0;
                            }
                        }
                    }
                }
            }
        }
    }

    let (w, h) = (frame.width, frame.height);
    let mut out = vec![0u8; w * h * 3];
    let sample = |p: &Plane, c: &Component, x: usize, y: usize| {
        if single {
            p.data[y * p.stride + x]
        } else {
            p.data[(y * c.v / vmax) * p.stride + x * c.h / hmax]
        }
    };
    let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            let luma = sample(&planes[0], &frame.comps[0], x, y);
            if single {
                out[o..o + 3].fill(to_u8(luma));
            } else {
                let cb = sample(&planes[1], &frame.comps[1], x, y) - 128.0;
                let cr = sample(&planes[2], &frame.comps[2], x, y) - 128.0;
                out[o] = to_u8(luma + 1.402 * cr);
                out[o + 1] = to_u8(luma - 0.344_136 * cb - 0.714_136 * cr);
                out[o + 2] = to_u8(luma + 1.772 * cb);
            }
        }
    }
    RgbImage::new(w, h, out)
}
