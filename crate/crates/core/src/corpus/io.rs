use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Corpus, DatasetSplit, Utterance};
use crate::error::{Error, Result};
use crate::objective::{Tag, TokenSequence, Vocabulary};
use crate::tensorcore::Tensor;

const MAGIC: &str = "cslab-corpus";
const VERSION: &str = "v1";
const SPLIT_LIST: &str = "splits.txt";
const VOCAB_FILE: &str = "vocab.txt";

/// Writes the features file body: header, then per utterance a metadata line,
/// a `token:lang` line and `L` rows of `D` values with 17 significant digits.
pub fn write_split<W: Write>(w: &mut W, split: &DatasetSplit, vocab: &Vocabulary) -> std::io::Result<()> {
    let d = split.utterances.first().map_or(0, |u| u.features.last_dim());
    writeln!(w, "{MAGIC} {VERSION} {} {d}", split.utterances.len())?;
    for u in &split.utterances {
        writeln!(w, "{} {} {} {}", u.id, u.len(), u.reference.len(), u.switch_count)?;
        let toks: Vec<String> = u
            .reference
            .tokens()
            .iter()
            .map(|&t| format!("{t}:{}", vocab.tag(t).map_or("?", Tag::as_str)))
            .collect();
        writeln!(w, "{}", toks.join(" "))?;
        for j in 0..u.len() {
            let row: Vec<String> = u.features.row(j).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

fn write_durations<W: Write>(w: &mut W, split: &DatasetSplit) -> std::io::Result<()> {
    for u in &split.utterances {
        let durs: Vec<String> = u.durations.iter().map(usize::to_string).collect();
        writeln!(w, "{} {}", u.id, durs.join(" "))?;
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    path: std::path::PathBuf,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(&self.path, e)),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, detail: &str) -> Error {
        Error::format(&self.path, format!("line {}: {detail}", self.line))
    }
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>, lines: &Lines<impl BufRead>, what: &str) -> Result<T> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| lines.err(&format!("bad {what}")))
}

/// Reads one split written by [`write_split`], attaching durations from the
/// sidecar `.dur` file next to it.
pub fn read_split(path: &Path, name: &str, vocab: &Vocabulary) -> Result<DatasetSplit> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Lines {
        inner: BufReader::new(file).lines(),
        path: path.to_path_buf(),
        line: 0,
    };
    let header = lines.next()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(lines.err("not a corpus file"));
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION {
        return Err(Error::FormatVersionMismatch(format!("{}: found {version:?}, expected {VERSION}", path.display())));
    }
    let n: usize = parse_num(parts.next(), &lines, "utterance count")?;
    let d: usize = parse_num(parts.next(), &lines, "feature dimension")?;

    let dur_path = path.with_extension("dur");
    let dur_text = fs::read_to_string(&dur_path).map_err(|e| Error::io(&dur_path, e))?;
    let mut dur_lines = dur_text.lines();

    let mut utterances = Vec::with_capacity(n);
    for _ in 0..n {
        let meta = lines.next()?;
        let mut m = meta.split_whitespace();
        let id = m.next().ok_or_else(|| lines.err("missing id"))?.to_string();
        let len: usize = parse_num(m.next(), &lines, "frame count")?;
        let s: usize = parse_num(m.next(), &lines, "token count")?;
        let switch_count: usize = parse_num(m.next(), &lines, "switch count")?;

        let tok_line = lines.next()?;
        let mut tokens = Vec::with_capacity(s);
        for pair in tok_line.split_whitespace() {
            let (t, tag) = pair.split_once(':').ok_or_else(|| lines.err("bad token:lang pair"))?;
            let t: usize = t.parse().map_err(|_| lines.err("bad token index"))?;
            if vocab.tag(t).map(Tag::as_str) != Some(tag) {
                return Err(lines.err(&format!("token {t} tag {tag:?} disagrees with vocabulary")));
            }
            tokens.push(t);
        }
        if tokens.len() != s {
            return Err(lines.err("token count mismatch"));
        }

        let mut data = Vec::with_capacity(len * d);
        for _ in 0..len {
            let row = lines.next()?;
            let before = data.len();
            for v in row.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| lines.err("bad feature value"))?);
            }
            if data.len() - before != d {
                return Err(lines.err("feature row width mismatch"));
            }
        }
        let features = Tensor::new(vec![len, d], data).map_err(|e| lines.err(&e.to_string()))?;

        let dur_line = dur_lines
            .next()
            .ok_or_else(|| Error::format(&dur_path, format!("missing durations for {id}")))?;
        let mut dl = dur_line.split_whitespace();
        if dl.next() != Some(id.as_str()) {
            return Err(Error::format(&dur_path, format!("durations out of order at {id}")));
        }
        let durations: Vec<usize> = dl
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&dur_path, format!("bad duration for {id}")))?;
        if durations.len() != s || durations.iter().sum::<usize>() != len {
            return Err(Error::format(&dur_path, format!("durations of {id} do not cover its frames")));
        }
        utterances.push(Utterance {
            id,
            features,
            reference: TokenSequence(tokens),
            durations,
            switch_count,
        });
    }
    Ok(DatasetSplit {
        name: name.to_string(),
        utterances,
    })
}

pub fn write_vocabulary<W: Write>(w: &mut W, vocab: &Vocabulary) -> std::io::Result<()> {
    for (i, (sym, tag)) in vocab.symbols().iter().zip(vocab.tags()).enumerate() {
        writeln!(w, "{i} {sym} {}", tag.as_str())?;
    }
    Ok(())
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut symbols = Vec::new();
    let mut tags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `index symbol tag`", n + 1));
        if f.len() != 3 || f[0].parse::<usize>().ok() != Some(n) {
            return Err(bad());
        }
        symbols.push(f[1].to_string());
        tags.push(Tag::parse(f[2]).ok_or_else(bad)?);
    }
    Vocabulary::new(symbols, tags)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes `vocab.txt`, `splits.txt` and one `<split>.txt` / `<split>.dur`
/// pair per split into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(VOCAB_FILE);
    let mut w = create(&p)?;
    write_vocabulary(&mut w, &corpus.vocab).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;

    let p = dir.join(SPLIT_LIST);
    let names: String = corpus.splits.iter().map(|s| format!("{}\n", s.name)).collect();
    fs::write(&p, names).map_err(|e| Error::io(&p, e))?;

    for split in &corpus.splits {
        let p = dir.join(format!("{}.txt", split.name));
        let mut w = create(&p)?;
        write_split(&mut w, split, &corpus.vocab).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{}.dur", split.name));
        let mut w = create(&p)?;
        write_durations(&mut w, split).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = read_vocabulary(&dir.join(VOCAB_FILE))?;
    let list = dir.join(SPLIT_LIST);
    let names = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let splits = names
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|name| read_split(&dir.join(format!("{name}.txt")), name, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { vocab, splits })
}
