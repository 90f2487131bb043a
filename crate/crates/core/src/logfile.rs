//! Append-only record file.
//!
//! Layout: the magic bytes `AEGL`, one version byte, then records of
//! `[u32 length | payload | u32 CRC32(payload)]`, integers little-endian.
//! A torn record at the tail (short header, short payload or bad checksum on
//! the final record) is the signature of a crash mid-write and is truncated on
//! open; a bad checksum followed by further data is reported as corruption.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AEGL";
pub const VERSION: u8 = 1;
const HEADER_LEN: u64 = 5;
const MAX_RECORD: u32 = 16 << 20;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: not a record log (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported record log version {version}")]
    Version { path: PathBuf, version: u8 },
    #[error("{path}: corrupt record at offset {offset}")]
    Corrupt { path: PathBuf, offset: u64 },
    #[error("record of {0} bytes exceeds limit")]
    TooLarge(usize),
}

#[derive(Debug)]
pub struct RecordLog {
    file: File,
    path: PathBuf,
    len: u64,
    sync: bool,
}

/// What `RecordLog::open` found on disk.
#[derive(Debug, Default)]
pub struct Recovered {
    pub records: Vec<Vec<u8>>,
    /// Bytes of torn tail discarded during recovery.
    pub truncated_bytes: u64,
}

impl RecordLog {
    /// Opens (creating if needed) the log at `path`, returning every intact
    /// record. With `sync` set, each append is fsynced before returning.
    pub fn open(path: impl AsRef<Path>, sync: bool) -> Result<(Self, Recovered), LogError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;

        let mut recovered = Recovered::default();
        let valid_len = if (buf.len() as u64) < HEADER_LEN {
            // Fresh file, or a crash before the header made it out.
            if !buf.is_empty() && !MAGIC.starts_with(&buf[..buf.len().min(4)]) {
                return Err(LogError::BadMagic { path });
            }
            file.set_len(0)?;
            file.seek(SeekFrom::Start(0))?;
            file.write_all(MAGIC)?;
            file.write_all(&[VERSION])?;
            if sync {
                file.sync_all()?;
            }
            recovered.truncated_bytes = buf.len() as u64;
            HEADER_LEN
        } else {
            let (records, valid) = parse(&buf, &path)?;
            recovered.records = records;
            recovered.truncated_bytes = buf.len() as u64 - valid;
            if valid < buf.len() as u64 {
                file.set_len(valid)?;
                if sync {
                    file.sync_all()?;
                }
            }
            valid
        };
        file.seek(SeekFrom::Start(valid_len))?;
        Ok((Self { file, path, len: valid_len, sync }, recovered))
    }

    /// Reads every intact record without modifying the file.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>, LogError> {
        let path = path.as_ref();
        let buf = fs::read(path)?;
        if buf.len() < HEADER_LEN as usize {
            return Ok(Vec::new());
        }
        Ok(parse(&buf, path)?.0)
    }

    pub fn append(&mut self, payload: &[u8]) -> Result<(), LogError> {
        let len = u32::try_from(payload.len()).ok().filter(|l| *l <= MAX_RECORD).ok_or(LogError::TooLarge(payload.len()))?;
        let mut rec = Vec::with_capacity(payload.len() + 8);
        rec.extend_from_slice(&len.to_le_bytes());
        rec.extend_from_slice(payload);
        rec.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        if let Err(e) = self.file.write_all(&rec) {
            // Leave no half record behind for the next append to build on.
            let _ = self.file.set_len(self.len);
            let _ = self.file.seek(SeekFrom::Start(self.len));
            return Err(e.into());
        }
        if self.sync {
            self.file.sync_data()?;
        }
        self.len += rec.len() as u64;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Current length of the valid file contents in bytes.
    pub fn byte_len(&self) -> u64 {
        self.len
    }

    /// Atomically replaces the file at `path` with a log holding `records`.
    pub fn rewrite(path: impl AsRef<Path>, records: &[Vec<u8>], sync: bool) -> Result<Self, LogError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let _ = fs::remove_file(&tmp);
        {
            let (mut log, _) = RecordLog::open(&tmp, false)?;
            for r in records {
                log.append(r)?;
            }
            if sync {
                log.file.sync_all()?;
            }
        }
        fs::rename(&tmp, path)?;
        Ok(RecordLog::open(path, sync)?.0)
    }
}

fn parse(buf: &[u8], path: &Path) -> Result<(Vec<Vec<u8>>, u64), LogError> {
    if &buf[..4] != MAGIC {
        return Err(LogError::BadMagic { path: path.to_path_buf() });
    }
    if buf[4] != VERSION {
        return Err(LogError::Version { path: path.to_path_buf(), version: buf[4] });
    }
    let mut records = Vec::new();
    let mut off = HEADER_LEN as usize;
    while off < buf.len() {
        let rest = &buf[off..];
        if rest.len() < 4 {
            break;
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap());
        let total = 8 + len as usize;
        if rest.len() < total {
            break;
        }
        if len > MAX_RECORD {
            return Err(LogError::Corrupt { path: path.to_path_buf(), offset: off as u64 });
        }
        let payload = &rest[4..4 + len as usize];
        let crc = u32::from_le_bytes(rest[4 + len as usize..total].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            if off + total == buf.len() {
                break;
            }
            return Err(LogError::Corrupt { path: path.to_path_buf(), offset: off as u64 });
        }
        records.push(payload.to_vec());
        off += total;
    }
    Ok((records, off as u64))
}
