use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// A non-empty sentence as vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentenceIds(Vec<u32>);

impl SentenceIds {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("sentence must contain at least one token".into()));
        }
        Ok(SentenceIds(ids))
    }

    pub fn from_words(vocab: &Vocabulary, line: &str) -> Result<Self> {
        Self::new(line.split_whitespace().map(|w| vocab.id_or_unk(w)).collect())
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_words<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        vocab.decode(&self.0)
    }

    /// Checks every id against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(id) => Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

/// Word alignment as sorted, deduplicated `(source, target)` index pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AlignmentLinks(Vec<(usize, usize)>);

impl AlignmentLinks {
    pub fn new(mut links: Vec<(usize, usize)>) -> Self {
        links.sort_unstable();
        links.dedup();
        AlignmentLinks(links)
    }

    /// `i-j` pairs separated by whitespace.
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let links = line
            .split_whitespace()
            .map(|tok| {
                let (s, t) = tok.split_once('-').ok_or_else(|| format!("bad link {tok:?}"))?;
                let s = s.parse().map_err(|_| format!("bad link {tok:?}"))?;
                let t = t.parse().map_err(|_| format!("bad link {tok:?}"))?;
                Ok((s, t))
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Self::new(links))
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, src_len: usize, tgt_len: usize) -> std::result::Result<(), String> {
        match self.0.iter().find(|&&(s, t)| s >= src_len || t >= tgt_len) {
            Some((s, t)) => Err(format!(
                "link {s}-{t} out of range for {src_len}-word source / {tgt_len}-word target"
            )),
            None => Ok(()),
        }
    }

    /// Source indices aligned to target position `t`, ascending.
    pub fn sources_of(&self, t: usize) -> Vec<usize> {
        self.0.iter().filter(|l| l.1 == t).map(|l| l.0).collect()
    }

    /// Links with both sides shifted; used to compose phrase alignments.
    pub fn offset(&self, src: usize, tgt: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(move |&(s, t)| (s + src, t + tgt))
    }
}

impl std::fmt::Display for AlignmentLinks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (s, t)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s}-{t}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelExample {
    pub source: SentenceIds,
    pub target: SentenceIds,
    pub alignment: Option<AlignmentLinks>,
}

impl ParallelExample {
    pub fn new(source: SentenceIds, target: SentenceIds, alignment: Option<AlignmentLinks>) -> Result<Self> {
        if let Some(a) = &alignment {
            a.validate(source.len(), target.len()).map_err(Error::InvalidArgument)?;
        }
        Ok(ParallelExample { source, target, alignment })
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(Into::into)
}

/// Reads a whitespace-tokenized parallel corpus (one sentence per line),
/// optionally with a Pharaoh `i-j` alignment file.
pub fn read_parallel(
    src_path: &Path,
    tgt_path: &Path,
    align_path: Option<&Path>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<ParallelExample>> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    let align = align_path.map(read_lines).transpose()?;
    if src.len() != tgt.len() {
        return Err(Error::parse(
            tgt_path,
            src.len().min(tgt.len()) + 1,
            format!("line count mismatch: {} source vs {} target lines", src.len(), tgt.len()),
        ));
    }
    if let (Some(a), Some(p)) = (&align, align_path) {
        if a.len() != src.len() {
            return Err(Error::parse(
                p,
                src.len().min(a.len()) + 1,
                format!("line count mismatch: {} alignment vs {} source lines", a.len(), src.len()),
            ));
        }
    }

    let mut out = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let lineno = i + 1;
        let source = SentenceIds::from_words(src_vocab, s)
            .map_err(|_| Error::parse(src_path, lineno, "empty sentence"))?;
        let target = SentenceIds::from_words(tgt_vocab, t)
            .map_err(|_| Error::parse(tgt_path, lineno, "empty sentence"))?;
        let alignment = match (&align, align_path) {
            (Some(a), Some(p)) => {
                let links = AlignmentLinks::parse(&a[i]).map_err(|m| Error::parse(p, lineno, m))?;
                links
                    .validate(source.len(), target.len())
                    .map_err(|m| Error::parse(p, lineno, m))?;
                Some(links)
            }
            _ => None,
        };
        out.push(ParallelExample { source, target, alignment });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_pharaoh_links() {
        let a = AlignmentLinks::parse("0-0 1-2").unwrap();
        assert_eq!(a.links(), &[(0, 0), (1, 2)]);
        assert!(AlignmentLinks::parse("").unwrap().is_empty());
        assert!(AlignmentLinks::parse("0_1").is_err());
        assert_eq!(a.to_string(), "0-0 1-2");
    }

    fn setup(src: &str, tgt: &str, align: &str) -> (tempfile::TempDir, Vocabulary, Vocabulary) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("s"), src).unwrap();
        fs::write(dir.path().join("t"), tgt).unwrap();
        fs::write(dir.path().join("a"), align).unwrap();
        let sv = Vocabulary::build_from_lines(src.lines(), 100).unwrap();
        let tv = Vocabulary::build_from_lines(tgt.lines(), 100).unwrap();
        (dir, sv, tv)
    }

    #[test]
    fn reads_examples_with_unk_fallback() {
        let (dir, sv, tv) = setup("a b c\nd e\n", "x y\nz\n", "0-0 1-1\n\n");
        let sv_small = Vocabulary::build_from_lines(["a b"], 100).unwrap();
        let p = dir.path();
        let ex = read_parallel(&p.join("s"), &p.join("t"), Some(&p.join("a")), &sv_small, &tv).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].source.ids()[2], super::super::vocab::UNK);
        assert_eq!(ex[0].alignment.as_ref().unwrap().links(), &[(0, 0), (1, 1)]);
        assert!(ex[1].alignment.as_ref().unwrap().is_empty());

        let no_align = read_parallel(&p.join("s"), &p.join("t"), None, &sv, &tv).unwrap();
        assert!(no_align[0].alignment.is_none());
    }

    #[test]
    fn out_of_range_link_rejected_with_line() {
        let (dir, sv, tv) = setup("a b c\n", "x y z\n", "5-0\n");
        let p = dir.path();
        let err = read_parallel(&p.join("s"), &p.join("t"), Some(&p.join("a")), &sv, &tv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn line_count_mismatch_rejected() {
        let (dir, sv, tv) = setup("a\nb\n", "x\n", "\n\n");
        let p = dir.path();
        assert!(matches!(
            read_parallel(&p.join("s"), &p.join("t"), None, &sv, &tv),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn unparseable_link_rejected_with_line() {
        let (dir, sv, tv) = setup("a\nb\n", "x\ny\n", "0-0\nzz\n");
        let p = dir.path();
        let err = read_parallel(&p.join("s"), &p.join("t"), Some(&p.join("a")), &sv, &tv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
