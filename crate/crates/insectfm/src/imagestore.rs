//! Lossless binary PGM/PPM images and a checksummed image directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use insectfm_core::image::Image;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl::{read_text, write_atomic};

pub const INDEX_FILE: &str = "SHA256SUMS";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

/// `P5` for one channel, `P6` for three; maxval 255.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("cannot store a {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format(format!("not a binary PNM image: {m}"));
    // header: magic, width, height, maxval, separated by whitespace and
    // optional comments, then exactly one whitespace byte
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    i += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("unsupported magic")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data = bytes.get(i..).unwrap_or_default();
    if data.len() != w * h * channels {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok(Image::from_pixels(h, w, channels, data.to_vec())?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_pnm(img)?)
}

/// Write `<name>` files into `dir` with a `SHA256SUMS` index listing
/// every file in the given order.
pub fn write_store(dir: &Path, files: &[(String, &Image)]) -> Result<String> {
    let mut index = String::new();
    for (name, img) in files {
        let bytes = encode_pnm(img)?;
        write_atomic(&dir.join(name), &bytes)?;
        writeln!(index, "{}  {name}", sha256_hex(&bytes)).expect("write to string");
    }
    write_atomic(&dir.join(INDEX_FILE), index.as_bytes())?;
    Ok(index)
}

/// Check every file listed in the index; returns the number verified.
pub fn verify_store(dir: &Path) -> Result<usize> {
    let index_path = dir.join(INDEX_FILE);
    let text = read_text(&index_path)?;
    let mut n = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let Some((hash, name)) = line.split_once("  ") else {
            return Err(Error::Parse {
                path: index_path.clone(),
                line: i + 1,
                message: "expected `<sha256>  <file>`".into(),
            });
        };
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != hash {
            return Err(Error::Format(format!("checksum mismatch for {}", path.display())));
        }
        n += 1;
    }
    Ok(n)
}
