//! Manifest and mel-file I/O.
//!
//! A manifest is JSON Lines, one utterance per line:
//!
//! ```text
//! {"id":"u1","mel_path":"mels/u1.mel","phonemes":"3 7 1","durations":"2 4 3","speaker":0,"emotion":2,"text_key":"t17"}
//! ```
//!
//! `mel_path` is resolved relative to the manifest's directory. Two optional
//! fields, `pitch` and `energy` (space-separated reals, one per frame),
//! override the targets otherwise extracted from the mel. Mel files are
//! plain text: a magic line, a `frames T bins M hop_ms H` header, then one
//! line of `M` values per frame.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::prosody::{extract_prosody_targets, normalize_pitch};
use super::{MelSpectrogram, PhonemeItem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MEL_MAGIC: &str = "emotts-mel v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub mel_path: String,
    pub phonemes: String,
    pub durations: String,
    pub speaker: usize,
    pub emotion: usize,
    pub text_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<PhonemeItem>> {
    let (items, warnings) = load_manifest_with_warnings(path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(items)
}

/// As [`load_manifest`], returning warnings instead of logging them.
pub fn load_manifest_with_warnings(path: &Path) -> Result<(Vec<PhonemeItem>, Vec<String>)> {
    let manifest_err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file =
        fs::File::open(path).map_err(|e| manifest_err(0, format!("cannot open manifest: {e}")))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut items = Vec::new();
    let mut extracted = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| manifest_err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| manifest_err(lineno, format!("malformed record: {e}")))?;
        let phonemes = parse_list::<usize>(&rec.phonemes)
            .map_err(|e| manifest_err(lineno, format!("phonemes: {e}")))?;
        let durations = parse_list::<usize>(&rec.durations)
            .map_err(|e| manifest_err(lineno, format!("durations: {e}")))?;
        let mel_path = base.join(&rec.mel_path);
        let mel = read_mel(&mel_path)
            .map_err(|e| manifest_err(lineno, format!("utterance {}: {e}", rec.id)))?;
        let total: usize = durations.iter().sum();
        if total != mel.frames() {
            return Err(manifest_err(
                lineno,
                format!(
                    "utterance {}: durations sum to {total} but mel has {} frames",
                    rec.id,
                    mel.frames()
                ),
            ));
        }
        let (mut pitch, mut energy) = extract_prosody_targets(&mel, &durations)?;
        let explicit_pitch = rec.pitch.is_some();
        if let Some(p) = &rec.pitch {
            pitch = parse_list(p).map_err(|e| manifest_err(lineno, format!("pitch: {e}")))?;
        }
        if let Some(e) = &rec.energy {
            energy = parse_list(e).map_err(|e| manifest_err(lineno, format!("energy: {e}")))?;
        }
        let item = PhonemeItem {
            id: rec.id,
            phoneme_ids: phonemes,
            speaker_id: rec.speaker,
            emotion_id: rec.emotion,
            durations,
            pitch,
            energy,
            mel,
            text_key: rec.text_key,
        };
        item.validate()
            .map_err(|e| manifest_err(lineno, e.to_string()))?;
        if !explicit_pitch {
            extracted.push(items.len());
        }
        items.push(item);
    }
    if !extracted.is_empty() {
        let mut subset: Vec<PhonemeItem> = extracted.iter().map(|&i| items[i].clone()).collect();
        normalize_pitch(&mut subset);
        for (&i, item) in extracted.iter().zip(subset) {
            items[i] = item;
        }
    }
    let mut warnings = Vec::new();
    if items.is_empty() {
        warnings.push(format!(
            "manifest {} contains no utterances",
            path.display()
        ));
    }
    Ok((items, warnings))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split_whitespace()
        .map(|tok| tok.parse::<T>().map_err(|e| format!("{tok:?}: {e}")))
        .collect()
}

fn join_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad =
        |reason: &str| Error::invalid(format!("mel file {}", path.display()), reason.to_string());
    let mut lines = text.lines();
    if lines.next() != Some(MEL_MAGIC) {
        return Err(bad("missing mel header"));
    }
    let header: Vec<&str> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .collect();
    let (frames, bins, hop) = match header.as_slice() {
        ["frames", t, "bins", m, "hop_ms", h] => (
            t.parse::<usize>().map_err(|_| bad("bad frame count"))?,
            m.parse::<usize>().map_err(|_| bad("bad bin count"))?,
            h.parse::<f64>().map_err(|_| bad("bad hop"))?,
        ),
        _ => return Err(bad("malformed dimension header")),
    };
    let mut data = Vec::with_capacity(frames * bins);
    for _ in 0..frames {
        let row = lines
            .next()
            .ok_or_else(|| bad("fewer rows than declared"))?;
        let vals = parse_list::<f64>(row).map_err(|e| bad(&e))?;
        if vals.len() != bins {
            return Err(bad("row width differs from declared bins"));
        }
        data.extend(vals);
    }
    let mel = MelSpectrogram {
        values: Tensor::from_vec(frames, bins, data),
        frame_hop_ms: hop,
    };
    mel.validate()?;
    Ok(mel)
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{MEL_MAGIC}").map_err(io)?;
    writeln!(
        w,
        "frames {} bins {} hop_ms {}",
        mel.frames(),
        mel.n_mels(),
        mel.frame_hop_ms
    )
    .map_err(io)?;
    for row in mel.values.iter_rows() {
        writeln!(w, "{}", join_list(row)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `dir/manifest.jsonl` and `dir/mels/<id>.mel`, including exact
/// pitch/energy targets. Returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &[PhonemeItem]) -> Result<PathBuf> {
    let mel_dir = dir.join("mels");
    fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for item in corpus {
        let rel = format!("mels/{}.mel", item.id);
        write_mel(&dir.join(&rel), &item.mel)?;
        let rec = ManifestRecord {
            id: item.id.clone(),
            mel_path: rel,
            phonemes: join_list(&item.phoneme_ids),
            durations: join_list(&item.durations),
            speaker: item.speaker_id,
            emotion: item.emotion_id,
            text_key: item.text_key.clone(),
            pitch: Some(join_list(&item.pitch)),
            energy: Some(join_list(&item.energy)),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_corpus, SyntheticSpec};

    fn write_lines(dir: &Path, lines: &[String]) -> PathBuf {
        let p = dir.join("manifest.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    fn record(id: &str, durations: &str) -> String {
        format!(
            r#"{{"id":"{id}","mel_path":"{id}.mel","phonemes":"1 2","durations":"{durations}","speaker":0,"emotion":1,"text_key":"t"}}"#
        )
    }

    fn mel(frames: usize) -> MelSpectrogram {
        MelSpectrogram::new(Tensor::from_vec(
            frames,
            3,
            (0..frames * 3).map(|x| x as f64 * 0.1).collect(),
        ))
    }

    #[test]
    fn loads_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c"] {
            write_mel(&dir.path().join(format!("{id}.mel")), &mel(4)).unwrap();
        }
        let p = write_lines(
            dir.path(),
            &[record("a", "1 3"), record("b", "2 2"), record("c", "0 4")],
        );
        let items = load_manifest(&p).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[2].durations, vec![0, 4]);
        assert_eq!(items[0].mel.values, mel(4).values);
    }

    #[test]
    fn duration_mismatch_cites_line_and_utterance() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b"] {
            write_mel(&dir.path().join(format!("{id}.mel")), &mel(4)).unwrap();
        }
        let p = write_lines(dir.path(), &[record("a", "1 3"), record("b", "2 3")]);
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("utterance b"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &["{not json".to_string()]);
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }), "{err}");
        let p = write_lines(
            dir.path(),
            &[record("a", "1 3").replace("\"speaker\"", "\"spk\"")],
        );
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn missing_manifest_is_an_error() {
        assert!(load_manifest(Path::new("/nonexistent/manifest.jsonl")).is_err());
    }

    #[test]
    fn empty_manifest_warns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &[]);
        let (items, warnings) = load_manifest_with_warnings(&p).unwrap();
        assert!(items.is_empty());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn corpus_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::with_bins(2, 2, 8, 12, 5);
        spec.max_phonemes = 5;
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let p = write_corpus(dir.path(), &corpus).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), corpus);
    }
}
