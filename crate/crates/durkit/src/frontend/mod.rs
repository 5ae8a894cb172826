//! Text frontend: lexicon lookup, phoneme vocabulary, forced-alignment
//! ingestion (see [`textgrid`]), and speaking-speed quantization.

pub mod textgrid;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use crate::align::{DurationSequence, PhonemeSequence, FRAME_SECONDS};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SIL_ID: usize = 2;
pub const PAD_SYMBOL: &str = "<pad>";
pub const UNK_SYMBOL: &str = "<unk>";
/// Symbol used for silence intervals emitted by forced aligners.
pub const SIL_SYMBOL: &str = "SIL";

/// Number of quantized speaking-speed levels (very slow .. very fast).
pub const NUM_SPEED_LEVELS: usize = 5;

/// Phoneme symbol table. Ids 0..=2 are reserved for PAD, UNK and SIL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build a vocabulary from phoneme symbols; reserved symbols are always
    /// present and non-reserved symbols are sorted for determinism.
    pub fn from_symbols<I: IntoIterator<Item = S>, S: AsRef<str>>(symbols: I) -> Self {
        let mut set: Vec<String> = symbols
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| s != PAD_SYMBOL && s != UNK_SYMBOL && s != SIL_SYMBOL)
            .collect();
        set.sort();
        set.dedup();
        let mut symbols = vec![
            PAD_SYMBOL.to_string(),
            UNK_SYMBOL.to_string(),
            SIL_SYMBOL.to_string(),
        ];
        symbols.extend(set);
        Self::from_ordered(symbols)
    }

    /// Rebuild from an already-ordered symbol list (e.g. a manifest header).
    pub fn from_ordered(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Map symbols to ids, falling back to UNK for unknown symbols.
    pub fn sequence(&self, tokens: &[String]) -> Result<PhonemeSequence> {
        let ids = tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect();
        PhonemeSequence::new(tokens.to_vec(), ids, self.size())
    }
}

/// Word-to-phonemes dictionary in the MFA plain-text convention:
/// one entry per line, word and phonemes separated by whitespace,
/// `#` lines ignored.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, phonemes: Vec<String>) {
        self.entries.insert(word.into().to_lowercase(), phonemes);
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn from_reader(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let word = parts.next().expect("non-empty line has a first token");
            let phonemes: Vec<String> = parts.map(str::to_string).collect();
            if phonemes.is_empty() {
                return Err(Error::parse(
                    source,
                    lineno + 1,
                    format!("lexicon entry {word:?} has no phonemes"),
                ));
            }
            entries.insert(word.to_lowercase(), phonemes);
        }
        Ok(Self { entries })
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.entries.iter()
    }

    /// Vocabulary covering every phoneme this lexicon can emit.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_symbols(self.entries.values().flatten())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (word, phonemes) in &self.entries {
            out.push_str(word);
            out.push('\t');
            out.push_str(&phonemes.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Convert whitespace-tokenized text into a phoneme sequence via lexicon
/// lookup. Out-of-lexicon tokens map to a single UNK.
pub fn text_to_phonemes(
    text: &str,
    lexicon: &Lexicon,
    vocab: &Vocabulary,
) -> Result<PhonemeSequence> {
    let normalized = text.trim();
    if normalized.is_empty() {
        return Err(Error::Data("text is empty after normalization".into()));
    }
    let mut tokens = Vec::new();
    for word in normalized.split_whitespace() {
        match lexicon.lookup(word) {
            Some(phonemes) => tokens.extend(phonemes.iter().cloned()),
            None => tokens.push(UNK_SYMBOL.to_string()),
        }
    }
    vocab.sequence(&tokens)
}

/// One aligned utterance: text, phonemes, frame durations and conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub phonemes: PhonemeSequence,
    pub durations: DurationSequence,
    pub speed_level: usize,
    pub scene_id: usize,
}

impl UtteranceRecord {
    pub fn new(
        id: String,
        text: String,
        phonemes: PhonemeSequence,
        durations: DurationSequence,
        speed_level: usize,
        scene_id: usize,
        num_scenes: usize,
    ) -> Result<Self> {
        if phonemes.len() != durations.len() {
            return Err(Error::Data(format!(
                "utterance {id}: {} phonemes but {} durations",
                phonemes.len(),
                durations.len()
            )));
        }
        if speed_level >= NUM_SPEED_LEVELS {
            return Err(Error::Data(format!(
                "utterance {id}: speed level {speed_level} out of range"
            )));
        }
        if scene_id >= num_scenes {
            return Err(Error::Data(format!(
                "utterance {id}: scene id {scene_id} out of range for {num_scenes} scenes"
            )));
        }
        Ok(Self {
            id,
            text,
            phonemes,
            durations,
            speed_level,
            scene_id,
        })
    }

    /// Speaking rate in phonemes per second. Silence phones are excluded
    /// from the count by default (they are pauses, not articulation).
    pub fn phoneme_rate(&self, include_sil: bool) -> f64 {
        let n = self
            .phonemes
            .tokens()
            .iter()
            .filter(|t| include_sil || t.as_str() != SIL_SYMBOL)
            .count();
        let seconds = self.durations.total_frames() as f64 * FRAME_SECONDS;
        n as f64 / seconds
    }
}

/// Maps a speaking rate (phonemes per second) onto one of five levels.
///
/// Boundaries sit at the 20/40/60/80th percentiles of the fitting corpus,
/// so each level covers an equal share of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedQuantizer {
    boundaries: [f64; NUM_SPEED_LEVELS - 1],
}

impl SpeedQuantizer {
    pub fn from_boundaries(boundaries: [f64; NUM_SPEED_LEVELS - 1]) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(
                "speed boundaries must be strictly increasing".into(),
            ));
        }
        Ok(Self { boundaries })
    }

    /// Fit boundaries from corpus rates. Requires at least five distinct
    /// rates so every level can be populated.
    pub fn fit(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Data(
                "cannot fit speed quantizer on an empty corpus".into(),
            ));
        }
        let mut sorted: Vec<f64> = rates.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < NUM_SPEED_LEVELS {
            return Err(Error::Data(format!(
                "need at least {NUM_SPEED_LEVELS} distinct rates to fit speed levels, got {}",
                distinct.len()
            )));
        }
        let boundaries = [
            percentile(&sorted, 0.20),
            percentile(&sorted, 0.40),
            percentile(&sorted, 0.60),
            percentile(&sorted, 0.80),
        ];
        Self::from_boundaries(boundaries)
    }

    pub fn boundaries(&self) -> &[f64; NUM_SPEED_LEVELS - 1] {
        &self.boundaries
    }

    /// Quantize a positive rate; monotone non-decreasing in the rate.
    pub fn quantize(&self, rate: f64) -> usize {
        self.boundaries.iter().filter(|&&b| rate > b).count()
    }
}

/// Linear-interpolation percentile on sorted data: index h = (n-1)p,
/// value x[floor(h)] + frac(h) * (x[floor(h)+1] - x[floor(h)]).
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon_ba() -> Lexicon {
        let mut lex = Lexicon::new();
        lex.insert("ba", vec!["b".into(), "a".into()]);
        lex
    }

    #[test]
    fn lookup_expands_to_phonemes() {
        let lex = lexicon_ba();
        let vocab = lex.vocabulary();
        let seq = text_to_phonemes("ba", &lex, &vocab).unwrap();
        assert_eq!(seq.tokens(), &["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn oov_token_maps_to_unk() {
        let lex = Lexicon::new();
        let vocab = lex.vocabulary();
        let seq = text_to_phonemes("xq", &lex, &vocab).unwrap();
        assert_eq!(seq.tokens(), &[UNK_SYMBOL.to_string()]);
        assert_eq!(seq.ids(), &[UNK_ID]);
    }

    #[test]
    fn tokens_concatenate() {
        let lex = lexicon_ba();
        let vocab = lex.vocabulary();
        let seq = text_to_phonemes("ba ba", &lex, &vocab).unwrap();
        assert_eq!(seq.tokens().len(), 4);
        assert_eq!(
            seq.tokens(),
            &["b".to_string(), "a".into(), "b".into(), "a".into()]
        );
    }

    #[test]
    fn empty_text_is_an_error() {
        let lex = lexicon_ba();
        let vocab = lex.vocabulary();
        assert!(text_to_phonemes("   ", &lex, &vocab).is_err());
    }

    #[test]
    fn lexicon_parses_comments_and_tabs() {
        let data = "# comment line\nba\tb a\nda d a\n\n";
        let lex = Lexicon::from_reader(data.as_bytes(), "test.lex").unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.lookup("DA").unwrap(), &["d".to_string(), "a".into()]);
    }

    #[test]
    fn lexicon_rejects_entry_without_phonemes() {
        let err = Lexicon::from_reader("ba\n".as_bytes(), "test.lex").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn vocabulary_reserves_ids() {
        let vocab = Vocabulary::from_symbols(["b", "a"]);
        assert_eq!(vocab.id(PAD_SYMBOL), Some(PAD_ID));
        assert_eq!(vocab.id(UNK_SYMBOL), Some(UNK_ID));
        assert_eq!(vocab.id(SIL_SYMBOL), Some(SIL_ID));
        assert_eq!(vocab.id("a"), Some(3));
        assert_eq!(vocab.id("b"), Some(4));
        assert_eq!(vocab.size(), 5);
    }

    #[test]
    fn quantizer_matches_percentile_convention() {
        // Rates 1..=100 uniformly: type-7 percentiles give 20.8/40.6/60.4/80.2.
        let rates: Vec<f64> = (1..=100).map(|r| r as f64).collect();
        let q = SpeedQuantizer::fit(&rates).unwrap();
        let expect = [20.8, 40.6, 60.4, 80.2];
        for (got, want) in q.boundaries().iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
        assert_eq!(q.quantize(50.0), 2);
    }

    #[test]
    fn quantizer_extremes() {
        let q = SpeedQuantizer::from_boundaries([1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(q.quantize(0.5), 0);
        assert_eq!(q.quantize(9.0), 4);
        assert_eq!(q.quantize(2.0), 1); // boundary belongs to the lower level
    }

    #[test]
    fn quantizer_needs_five_distinct_rates() {
        assert!(SpeedQuantizer::fit(&[]).is_err());
        assert!(SpeedQuantizer::fit(&[1.0, 1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(SpeedQuantizer::fit(&[1.0, 2.0, 3.0, 4.0, 5.0]).is_ok());
    }

    #[test]
    fn record_validates_lengths_and_ranges() {
        let vocab = Vocabulary::from_symbols(["a"]);
        let seq = vocab.sequence(&["a".to_string()]).unwrap();
        let durs = DurationSequence::new(vec![5]).unwrap();
        assert!(UtteranceRecord::new(
            "u1".into(),
            "a".into(),
            seq.clone(),
            durs.clone(),
            5,
            0,
            3
        )
        .is_err());
        assert!(
            UtteranceRecord::new("u1".into(), "a".into(), seq.clone(), durs.clone(), 1, 3, 3)
                .is_err()
        );
        let rec = UtteranceRecord::new("u1".into(), "a".into(), seq, durs, 1, 0, 3).unwrap();
        // 1 phoneme over 5 frames = 0.05 s -> 20 phonemes/s.
        assert!((rec.phoneme_rate(false) - 20.0).abs() < 1e-12);
    }
}
