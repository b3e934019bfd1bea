//! On-disk partition segments.
//!
//! A segment is a sequence of frames:
//!
//! ```text
//! [u32 BE frame length][u32 BE key length][key bytes][value bytes]
//! ```
//!
//! where the frame length counts everything after itself. A trailing
//! incomplete frame (torn write) is cut off on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

pub(crate) fn encode_frame(key: &[u8], value: &[u8]) -> Vec<u8> {
    let body_len = 4 + key.len() + value.len();
    let mut buf = Vec::with_capacity(4 + body_len);
    buf.extend_from_slice(&(body_len as u32).to_be_bytes());
    buf.extend_from_slice(&(key.len() as u32).to_be_bytes());
    buf.extend_from_slice(key);
    buf.extend_from_slice(value);
    buf
}

pub(crate) struct Segment {
    path: PathBuf,
    file: File,
}

/// Key and value of one stored message.
pub(crate) type Frame = (Vec<u8>, Vec<u8>);

impl Segment {
    /// Opens (or creates) a segment and returns every complete frame in it.
    pub(crate) fn open(path: &Path) -> io::Result<(Self, Vec<Frame>)> {
        let mut frames = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            loop {
                let mut len_buf = [0u8; 4];
                if read_full(&mut reader, &mut len_buf)? < 4 {
                    break;
                }
                let body_len = u32::from_be_bytes(len_buf) as usize;
                if body_len < 4 {
                    break;
                }
                let mut body = vec![0u8; body_len];
                if read_full(&mut reader, &mut body)? < body_len {
                    break;
                }
                let key_len = u32::from_be_bytes(body[..4].try_into().unwrap()) as usize;
                if key_len > body_len - 4 {
                    break;
                }
                let value = body.split_off(4 + key_len);
                let key = body.split_off(4);
                frames.push((key, value));
                valid_len += 4 + body_len as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            frames,
        ))
    }

    pub(crate) fn append(&mut self, key: &[u8], value: &[u8]) -> io::Result<()> {
        self.file.write_all(&encode_frame(key, value))
    }

    /// Replaces the segment contents with `frames`.
    pub(crate) fn rewrite<'a, I>(&mut self, frames: I) -> io::Result<()>
    where
        I: IntoIterator<Item = (&'a [u8], &'a [u8])>,
    {
        let tmp = self.path.with_extension("log.tmp");
        {
            let mut out = io::BufWriter::new(File::create(&tmp)?);
            for (k, v) in frames {
                out.write_all(&encode_frame(k, v))?;
            }
            out.flush()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
