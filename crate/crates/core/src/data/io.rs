use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path};

use super::pgm;
use super::{Case, Prompt, Sample, SceneMeta, Split, Splits};
use crate::error::{Error, Result};

const MANIFEST_HEADER: &str = "case_id\tslice_id\timage_path\tmask_path\tprompt\tstratum";
const SPLITS_HEADER: &str = "case_id\tsplit";
const SCENES_HEADER: &str = "case_id\tslice_id\tscene";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub case_id: String,
    pub slice_id: usize,
    pub image_path: String,
    pub mask_path: String,
    pub prompt: String,
    pub stratum: usize,
}

fn check_field(file: &str, line: usize, name: &str, v: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::parse(file, line, format!("empty {name}")));
    }
    Ok(())
}

fn check_rel_path(file: &str, line: usize, p: &str) -> Result<()> {
    check_field(file, line, "path", p)?;
    let ok = Path::new(p)
        .components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !ok {
        return Err(Error::parse(file, line, format!("path {p:?} must be relative and stay inside the dataset")));
    }
    Ok(())
}

fn body<'a>(file: &str, text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == header => {}
        _ => return Err(Error::parse(file, 1, format!("expected header {header:?}"))),
    }
    Ok(lines
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty()))
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    const F: &str = "manifest.tsv";
    let mut rows = Vec::new();
    for (n, line) in body(F, text, MANIFEST_HEADER)? {
        let f: Vec<&str> = line.split('\t').collect();
        let [case_id, slice_id, image_path, mask_path, prompt, stratum] = f[..] else {
            return Err(Error::parse(F, n, format!("expected 6 fields, got {}", f.len())));
        };
        check_field(F, n, "case_id", case_id)?;
        check_field(F, n, "prompt", prompt)?;
        check_rel_path(F, n, image_path)?;
        check_rel_path(F, n, mask_path)?;
        let num = |v: &str, what: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::parse(F, n, format!("bad {what} {v:?}")))
        };
        rows.push(ManifestRow {
            case_id: case_id.to_string(),
            slice_id: num(slice_id, "slice_id")?,
            image_path: image_path.to_string(),
            mask_path: mask_path.to_string(),
            prompt: prompt.to_string(),
            stratum: num(stratum, "stratum")?,
        });
    }
    Ok(rows)
}

pub fn read_splits(text: &str) -> Result<Splits> {
    const F: &str = "splits.tsv";
    let mut rows = Vec::new();
    for (n, line) in body(F, text, SPLITS_HEADER)? {
        let (id, s) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(F, n, "expected case_id<TAB>split"))?;
        check_field(F, n, "case_id", id)?;
        let s: Split = s.parse().map_err(|_| Error::parse(F, n, format!("unknown split {s:?}")))?;
        rows.push((id.to_string(), s));
    }
    Splits::from_assignment(rows)
}

pub fn write_splits(splits: &Splits) -> String {
    let mut out = format!("{SPLITS_HEADER}\n");
    for (id, s) in splits.assignment() {
        out.push_str(&format!("{id}\t{s}\n"));
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `images/`, `masks/`, `manifest.tsv` and `scenes.tsv` under `dir`.
pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut scenes = format!("{SCENES_HEADER}\n");
    for c in cases {
        for s in &c.slices {
            let name = format!("{}_{}.pgm", s.case_id, s.slice_id);
            let img = format!("images/{name}");
            let mask = format!("masks/{name}");
            write(&dir.join(&img), &pgm::encode_p5(&pgm::from_tensor(&s.image)?))?;
            write(&dir.join(&mask), &pgm::encode_p5(&pgm::from_tensor(&s.mask)?))?;
            manifest.push_str(&format!(
                "{}\t{}\t{img}\t{mask}\t{}\t{}\n",
                s.case_id, s.slice_id, s.prompt, c.stratum
            ));
            let meta = serde_json::to_string(&s.meta).expect("plain meta");
            scenes.push_str(&format!("{}\t{}\t{meta}\n", s.case_id, s.slice_id));
        }
    }
    write(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    write(&dir.join("scenes.tsv"), scenes.as_bytes())
}

fn read_scenes(text: &str) -> Result<BTreeMap<(String, usize), SceneMeta>> {
    const F: &str = "scenes.tsv";
    let mut out = BTreeMap::new();
    for (n, line) in body(F, text, SCENES_HEADER)? {
        let mut it = line.splitn(3, '\t');
        let (Some(id), Some(sl), Some(js)) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(F, n, "expected 3 fields"));
        };
        let sl: usize = sl.parse().map_err(|_| Error::parse(F, n, "bad slice_id"))?;
        let meta: SceneMeta =
            serde_json::from_str(js).map_err(|e| Error::parse(F, n, e.to_string()))?;
        out.insert((id.to_string(), sl), meta);
    }
    Ok(out)
}

/// Reads a dataset directory. Scene metadata comes from `scenes.tsv` when
/// present and is otherwise reconstructed from the prompt alone.
pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    let text = String::from_utf8(read(&dir.join("manifest.tsv"))?)
        .map_err(|_| Error::Data("manifest.tsv is not UTF-8".into()))?;
    let rows = read_manifest(&text)?;
    let scenes_path = dir.join("scenes.tsv");
    let mut scenes = if scenes_path.exists() {
        let t = String::from_utf8(read(&scenes_path)?)
            .map_err(|_| Error::Data("scenes.tsv is not UTF-8".into()))?;
        read_scenes(&t)?
    } else {
        BTreeMap::new()
    };
    let mut cases: Vec<Case> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        let image = pgm::to_tensor(&pgm::parse(&read(&dir.join(&r.image_path))?)?);
        let mask = pgm::to_tensor(&pgm::parse(&read(&dir.join(&r.mask_path))?)?);
        if image.shape() != mask.shape() {
            return Err(Error::Data(format!(
                "{}: image {:?} and mask {:?} differ in shape",
                r.case_id,
                image.shape(),
                mask.shape()
            )));
        }
        let mask = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let meta = match scenes.remove(&(r.case_id.clone(), r.slice_id)) {
            Some(m) => m,
            None => SceneMeta {
                regions: Vec::new(),
                named: Prompt::parse(&r.prompt).map(|p| p.quadrants).unwrap_or_default(),
                ambiguous: false,
                aug: Vec::new(),
            },
        };
        let sample = Sample {
            case_id: r.case_id.clone(),
            slice_id: r.slice_id,
            image,
            mask,
            prompt: r.prompt,
            meta,
        };
        match index.get(&r.case_id) {
            Some(&k) => {
                if cases[k].stratum != r.stratum {
                    return Err(Error::Data(format!("case {} changes stratum", r.case_id)));
                }
                cases[k].slices.push(sample);
            }
            None => {
                index.insert(r.case_id.clone(), cases.len());
                cases.push(Case {
                    case_id: r.case_id,
                    stratum: r.stratum,
                    slices: vec![sample],
                });
            }
        }
    }
    Ok(cases)
}
