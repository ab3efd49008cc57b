//! Frame containers: binary PPM (P6) sequences and the FRV raw stream.
//!
//! ```text
//! PPM sequence: <dir>/frame_000000.ppm, frame_000001.ppm, ...   (P6, maxval 255)
//! FRV stream:   "FRV1" | width u32 LE | height u32 LE | frame_count u32 LE | RGB24 frames...
//! ```
//!
//! A `frame_count` of 0 means "until end of stream". Readers are strict:
//! truncation, trailing bytes and dimension drift are errors naming the frame.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::haze_model::{FrameId, Rgb8Image};

pub const FRV_MAGIC: &[u8; 4] = b"FRV1";
pub const FTV_MAGIC: &[u8; 4] = b"FTV1";
pub const SKIPPED_SIDECAR: &str = "skipped.txt";

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error("frame {frame}: {source}")]
    Io {
        frame: FrameId,
        #[source]
        source: io::Error,
    },
    #[error("{context}: {source}")]
    Open {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("frame {frame}: malformed data: {msg}")]
    Malformed { frame: FrameId, msg: String },
    #[error("frame {frame}: dimensions {found:?} differ from {expected:?}")]
    DimensionChange {
        frame: FrameId,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("frame {frame}: missing from the sequence")]
    Missing { frame: FrameId },
    #[error("frame {frame}: stream truncated")]
    Truncated { frame: FrameId },
    #[error("bad location `{0}` (expected seq:<dir> or frv:<file|->)")]
    BadLocation(String),
}

/// Where frames are read from or written to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameLocation {
    Seq(PathBuf),
    Frv(PathBuf),
    FrvStdio,
}

impl FromStr for FrameLocation {
    type Err = FrameIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(dir) = s.strip_prefix("seq:") {
            if !dir.is_empty() {
                return Ok(FrameLocation::Seq(PathBuf::from(dir)));
            }
        } else if let Some(file) = s.strip_prefix("frv:") {
            if file == "-" {
                return Ok(FrameLocation::FrvStdio);
            }
            if !file.is_empty() {
                return Ok(FrameLocation::Frv(PathBuf::from(file)));
            }
        }
        Err(FrameIoError::BadLocation(s.to_string()))
    }
}

impl fmt::Display for FrameLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameLocation::Seq(p) => write!(f, "seq:{}", p.display()),
            FrameLocation::Frv(p) => write!(f, "frv:{}", p.display()),
            FrameLocation::FrvStdio => f.write_str("frv:-"),
        }
    }
}

pub fn ppm_file_name(id: FrameId) -> String {
    format!("frame_{id:06}.ppm")
}

fn parse_ppm_name(name: &str) -> Option<FrameId> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".ppm")?;
    if digits.len() < 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let id: FrameId = digits.parse().ok()?;
    (ppm_file_name(id) == name).then_some(id)
}

/// Decodes a single binary PPM (P6, maxval 255). Header comments are accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8Image, String> {
    let mut pos = 0;
    let mut fields = [0u32; 3];

    let next_token = |pos: &mut usize| -> Result<String, String> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err("unexpected end of header".into()),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P6" {
        return Err(format!("unsupported magic `{magic}` (only P6)"));
    }
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(&mut pos)?;
        *slot = tok.parse().map_err(|_| format!("bad {name} `{tok}`"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (only 255)"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(3))
        .ok_or("dimensions overflow")?;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(format!("pixel data truncated: {} of {expected} bytes", data.len()));
    }
    if data.len() > expected {
        return Err(format!("{} trailing bytes after pixel data", data.len() - expected));
    }
    Ok(Rgb8Image { width, height, data: data.to_vec() })
}

/// Canonical P6 encoding, no comments.
pub fn encode_ppm(img: &Rgb8Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Reads `frame_%06d.ppm` files in id order.
pub struct PpmSequenceReader {
    dir: PathBuf,
    count: FrameId,
    first_gap: Option<FrameId>,
    next: FrameId,
    dims: Option<(u32, u32)>,
    failed: bool,
}

impl PpmSequenceReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, FrameIoError> {
        let dir = dir.as_ref().to_path_buf();
        let listing = fs::read_dir(&dir).map_err(|source| FrameIoError::Open {
            context: format!("reading directory {}", dir.display()),
            source,
        })?;
        let mut ids = Vec::new();
        for entry in listing {
            let entry = entry.map_err(|source| FrameIoError::Open {
                context: format!("reading directory {}", dir.display()),
                source,
            })?;
            if let Some(id) = entry.file_name().to_str().and_then(parse_ppm_name) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        let first_gap = ids.iter().enumerate().find(|(i, &id)| *i as FrameId != id).map(|(i, _)| i as FrameId);
        Ok(Self {
            dir,
            count: ids.len() as FrameId,
            first_gap,
            next: 0,
            dims: None,
            failed: false,
        })
    }

    /// Number of frames that will be yielded (stops early at a gap).
    pub fn len(&self) -> usize {
        self.first_gap.unwrap_or(self.count) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Iterator for PpmSequenceReader {
    type Item = Result<(FrameId, Rgb8Image), FrameIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let id = self.next;
        if let Some(gap) = self.first_gap {
            if id == gap {
                self.failed = true;
                return Some(Err(FrameIoError::Missing { frame: gap }));
            }
        } else if id >= self.count {
            return None;
        }
        self.next += 1;
        let result = fs::read(self.dir.join(ppm_file_name(id)))
            .map_err(|source| FrameIoError::Io { frame: id, source })
            .and_then(|bytes| {
                decode_ppm(&bytes).map_err(|msg| FrameIoError::Malformed { frame: id, msg })
            })
            .and_then(|img| check_dims(&mut self.dims, id, &img).map(|_| (id, img)));
        self.failed = result.is_err();
        Some(result)
    }
}

fn check_dims(dims: &mut Option<(u32, u32)>, id: FrameId, img: &Rgb8Image) -> Result<(), FrameIoError> {
    let found = (img.width, img.height);
    match *dims {
        None => {
            *dims = Some(found);
            Ok(())
        }
        Some(expected) if expected == found => Ok(()),
        Some(expected) => Err(FrameIoError::DimensionChange { frame: id, expected, found }),
    }
}

/// FRV stream header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrvHeader {
    pub width: u32,
    pub height: u32,
    /// 0 when the length is not known up front.
    pub frame_count: u32,
}

impl FrvHeader {
    pub const LEN: usize = 16;

    pub fn frame_bytes(&self) -> usize {
        self.width as usize * self.height as usize * 3
    }

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..4].copy_from_slice(FRV_MAGIC);
        out[4..8].copy_from_slice(&self.width.to_le_bytes());
        out[8..12].copy_from_slice(&self.height.to_le_bytes());
        out[12..16].copy_from_slice(&self.frame_count.to_le_bytes());
        out
    }
}

/// Fills `buf` completely, or reports how many bytes were available before EOF.
fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub struct FrvReader<R> {
    reader: R,
    header: FrvHeader,
    next: FrameId,
    done: bool,
}

impl<R: Read> FrvReader<R> {
    pub fn new(mut reader: R) -> Result<Self, FrameIoError> {
        let mut raw = [0u8; FrvHeader::LEN];
        let got = read_full(&mut reader, &mut raw).map_err(|source| FrameIoError::Io { frame: 0, source })?;
        if got < FrvHeader::LEN {
            return Err(FrameIoError::Malformed { frame: 0, msg: "FRV header truncated".into() });
        }
        if &raw[..4] != FRV_MAGIC {
            return Err(FrameIoError::Malformed { frame: 0, msg: "bad FRV magic".into() });
        }
        let word = |i: usize| u32::from_le_bytes(raw[i..i + 4].try_into().expect("4 bytes"));
        let header = FrvHeader { width: word(4), height: word(8), frame_count: word(12) };
        Ok(Self { reader, header, next: 0, done: false })
    }

    pub fn header(&self) -> FrvHeader {
        self.header
    }

    fn fail(&mut self, err: FrameIoError) -> Option<<Self as Iterator>::Item> {
        self.done = true;
        Some(Err(err))
    }
}

impl<R: Read> Iterator for FrvReader<R> {
    type Item = Result<(FrameId, Rgb8Image), FrameIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let id = self.next;
        let declared = self.header.frame_count as FrameId;
        let mut buf = vec![0u8; self.header.frame_bytes()];
        if declared > 0 && id == declared {
            self.done = true;
            // declared length reached; anything further is a violation
            let mut probe = [0u8; 1];
            return match read_full(&mut self.reader, &mut probe) {
                Ok(0) => None,
                Ok(_) => self.fail(FrameIoError::Malformed {
                    frame: id,
                    msg: format!("data beyond the declared {declared} frames"),
                }),
                Err(source) => self.fail(FrameIoError::Io { frame: id, source }),
            };
        }
        let got = match read_full(&mut self.reader, &mut buf) {
            Ok(n) => n,
            Err(source) => return self.fail(FrameIoError::Io { frame: id, source }),
        };
        if got == 0 && declared == 0 && !buf.is_empty() {
            self.done = true;
            return None;
        }
        if buf.is_empty() && declared == 0 {
            // zero-sized frames cannot delimit an open-ended stream
            self.done = true;
            return None;
        }
        if got < buf.len() {
            return self.fail(FrameIoError::Truncated { frame: id });
        }
        self.next += 1;
        let img = Rgb8Image { width: self.header.width, height: self.header.height, data: buf };
        Some(Ok((id, img)))
    }
}

/// Either container, as one iterator of `(id, frame)` in id order.
pub enum FrameReader {
    Seq(PpmSequenceReader),
    Frv(FrvReader<Box<dyn Read + Send>>),
}

impl Iterator for FrameReader {
    type Item = Result<(FrameId, Rgb8Image), FrameIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            FrameReader::Seq(r) => r.next(),
            FrameReader::Frv(r) => r.next(),
        }
    }
}

pub fn read_frames(location: &FrameLocation) -> Result<FrameReader, FrameIoError> {
    Ok(match location {
        FrameLocation::Seq(dir) => FrameReader::Seq(PpmSequenceReader::open(dir)?),
        FrameLocation::Frv(path) => {
            let file = File::open(path).map_err(|source| FrameIoError::Open {
                context: format!("opening {}", path.display()),
                source,
            })?;
            FrameReader::Frv(FrvReader::new(Box::new(BufReader::new(file)) as Box<dyn Read + Send>)?)
        }
        FrameLocation::FrvStdio => FrameReader::Frv(FrvReader::new(Box::new(io::stdin()) as Box<dyn Read + Send>)?),
    })
}

/// Reads an entire location into memory.
pub fn read_all(location: &FrameLocation) -> Result<Vec<Rgb8Image>, FrameIoError> {
    read_frames(location)?.map(|r| r.map(|(_, img)| img)).collect()
}

/// Ordered frame consumer. Skipped ids are recorded rather than written.
pub trait FrameWriter {
    fn write_frame(&mut self, id: FrameId, img: &Rgb8Image) -> Result<(), FrameIoError>;
    fn skip(&mut self, id: FrameId) -> Result<(), FrameIoError>;
    fn finish(self: Box<Self>) -> Result<(), FrameIoError>;
}

fn write_skipped(path: &Path, skipped: &[FrameId]) -> Result<(), FrameIoError> {
    if skipped.is_empty() {
        return Ok(());
    }
    let body: String = skipped.iter().map(|id| format!("{id}\n")).collect();
    fs::write(path, body).map_err(|source| FrameIoError::Io { frame: skipped[skipped.len() - 1], source })
}

pub struct PpmSequenceWriter {
    dir: PathBuf,
    dims: Option<(u32, u32)>,
    skipped: Vec<FrameId>,
}

impl PpmSequenceWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self, FrameIoError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| FrameIoError::Open {
            context: format!("creating {}", dir.display()),
            source,
        })?;
        Ok(Self { dir, dims: None, skipped: Vec::new() })
    }
}

impl FrameWriter for PpmSequenceWriter {
    fn write_frame(&mut self, id: FrameId, img: &Rgb8Image) -> Result<(), FrameIoError> {
        check_dims(&mut self.dims, id, img)?;
        fs::write(self.dir.join(ppm_file_name(id)), encode_ppm(img))
            .map_err(|source| FrameIoError::Io { frame: id, source })
    }

    fn skip(&mut self, id: FrameId) -> Result<(), FrameIoError> {
        self.skipped.push(id);
        Ok(())
    }

    fn finish(self: Box<Self>) -> Result<(), FrameIoError> {
        write_skipped(&self.dir.join(SKIPPED_SIDECAR), &self.skipped)
    }
}

trait WriteSeek: Write + Seek + Send {}
impl<T: Write + Seek + Send> WriteSeek for T {}

enum FrvSink {
    File(BufWriter<File>),
    Stream(Box<dyn Write + Send>),
}

/// FRV writer. File targets get their frame count patched on finish;
/// streams keep count 0.
pub struct FrvWriter {
    sink: FrvSink,
    header: Option<FrvHeader>,
    written: u32,
    skipped: Vec<FrameId>,
    sidecar: Option<PathBuf>,
}

impl FrvWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, FrameIoError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| FrameIoError::Open {
            context: format!("creating {}", path.display()),
            source,
        })?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".");
        sidecar.push(SKIPPED_SIDECAR);
        Ok(Self {
            sink: FrvSink::File(BufWriter::new(file)),
            header: None,
            written: 0,
            skipped: Vec::new(),
            sidecar: Some(PathBuf::from(sidecar)),
        })
    }

    pub fn stream(writer: Box<dyn Write + Send>) -> Self {
        Self { sink: FrvSink::Stream(writer), header: None, written: 0, skipped: Vec::new(), sidecar: None }
    }

    fn out(&mut self) -> &mut dyn Write {
        match &mut self.sink {
            FrvSink::File(f) => f,
            FrvSink::Stream(s) => s,
        }
    }
}

impl FrameWriter for FrvWriter {
    fn write_frame(&mut self, id: FrameId, img: &Rgb8Image) -> Result<(), FrameIoError> {
        let io_err = |source| FrameIoError::Io { frame: id, source };
        match self.header {
            None => {
                let header = FrvHeader { width: img.width, height: img.height, frame_count: 0 };
                self.header = Some(header);
                self.out().write_all(&header.encode()).map_err(io_err)?;
            }
            Some(h) if (h.width, h.height) != (img.width, img.height) => {
                return Err(FrameIoError::DimensionChange {
                    frame: id,
                    expected: (h.width, h.height),
                    found: (img.width, img.height),
                });
            }
            Some(_) => {}
        }
        self.out().write_all(&img.data).map_err(io_err)?;
        self.written += 1;
        Ok(())
    }

    fn skip(&mut self, id: FrameId) -> Result<(), FrameIoError> {
        self.skipped.push(id);
        Ok(())
    }

    fn finish(mut self: Box<Self>) -> Result<(), FrameIoError> {
        let last = FrameId::from(self.written);
        let io_err = |source| FrameIoError::Io { frame: last, source };
        if self.header.is_none() {
            let empty = FrvHeader { width: 0, height: 0, frame_count: 0 };
            self.out().write_all(&empty.encode()).map_err(io_err)?;
        }
        match &mut self.sink {
            FrvSink::File(f) => {
                f.flush().map_err(io_err)?;
                let file: &mut dyn WriteSeek = f.get_mut();
                file.seek(SeekFrom::Start(12)).map_err(io_err)?;
                file.write_all(&self.written.to_le_bytes()).map_err(io_err)?;
                file.flush().map_err(io_err)?;
            }
            FrvSink::Stream(s) => s.flush().map_err(io_err)?,
        }
        if let Some(sidecar) = &self.sidecar {
            write_skipped(sidecar, &self.skipped)?;
        }
        Ok(())
    }
}

pub fn create_writer(location: &FrameLocation) -> Result<Box<dyn FrameWriter + Send>, FrameIoError> {
    Ok(match location {
        FrameLocation::Seq(dir) => Box::new(PpmSequenceWriter::create(dir)?),
        FrameLocation::Frv(path) => Box::new(FrvWriter::create(path)?),
        FrameLocation::FrvStdio => Box::new(FrvWriter::stream(Box::new(io::stdout()))),
    })
}

/// Writes a complete in-order frame list.
pub fn write_frames<'a>(
    location: &FrameLocation,
    frames: impl IntoIterator<Item = (FrameId, &'a Rgb8Image)>,
) -> Result<(), FrameIoError> {
    let mut writer = create_writer(location)?;
    for (id, img) in frames {
        writer.write_frame(id, img)?;
    }
    writer.finish()
}

/// Float-plane container used for ground-truth transmission maps:
/// `"FTV1" | width u32 | height u32 | count u32 | count * width * height f32`, all LE.
pub fn write_float_planes<W: Write>(
    mut out: W,
    width: u32,
    height: u32,
    planes: &[Vec<f32>],
) -> io::Result<()> {
    out.write_all(FTV_MAGIC)?;
    out.write_all(&width.to_le_bytes())?;
    out.write_all(&height.to_le_bytes())?;
    out.write_all(&(planes.len() as u32).to_le_bytes())?;
    for plane in planes {
        debug_assert_eq!(plane.len(), width as usize * height as usize);
        for v in plane {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_float_planes<R: Read>(mut input: R) -> io::Result<(u32, u32, Vec<Vec<f32>>)> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != FTV_MAGIC {
        return Err(io::Error::new(ErrorKind::InvalidData, "bad FTV magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let (width, height, count) = (word(4), word(8), word(12));
    let n = width as usize * height as usize;
    let mut planes = Vec::with_capacity(count as usize);
    let mut raw = vec![0u8; n * 4];
    for _ in 0..count {
        input.read_exact(&mut raw)?;
        planes.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    Ok((width, height, planes))
}
