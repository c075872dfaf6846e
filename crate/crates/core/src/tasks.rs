//! Algorithmic tasks: alphabets, example generators, reference solvers,
//! datasets and binning.
//!
//! Numbers are written least-significant digit first. A two-operand input
//! is `digits(a) ++ [op] ++ digits(b)` and its target is the result's
//! digits, zero-extended to the input length, so that the network emits one
//! token per input position. Token `0` is the pad symbol everywhere.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::BinBatch;

pub const PAD: usize = 0;
pub const PAD_GLYPH: char = '_';

/// Binary tokens of the decimal-in-binary encoding.
const BIT0: usize = 1;
const BIT1: usize = 2;
const BIT0_START: usize = 3;
const BIT1_START: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    Addition,
    Sort,
    /// Binary multiplication.
    Mul2,
    /// Base-4 multiplication.
    Mul4,
    /// Decimal multiplication with every digit written as 4 marked bits.
    Mul10Bin,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Addition,
        TaskKind::Sort,
        TaskKind::Mul2,
        TaskKind::Mul4,
        TaskKind::Mul10Bin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Addition => "add",
            TaskKind::Sort => "sort",
            TaskKind::Mul2 => "mul2",
            TaskKind::Mul4 => "mul4",
            TaskKind::Mul10Bin => "mul10bin",
        }
    }

    /// Digit base of operands (sort: number of distinct values).
    pub fn base(self) -> u32 {
        match self {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Addition | TaskKind::Mul2 => 2,
            TaskKind::Mul4 => 4,
            TaskKind::Mul10Bin => 10,
            TaskKind::Sort => 6,
        }
    }

    /// Input tokens per operand digit.
    pub fn tokens_per_digit(self) -> usize {
        if self == TaskKind::Mul10Bin {
            4
        } else {
            1
        }
    }

    pub fn is_two_operand(self) -> bool {
        matches!(self, TaskKind::Addition | TaskKind::Mul2 | TaskKind::Mul4 | TaskKind::Mul10Bin)
    }

    pub fn alphabet(self) -> Alphabet {
        let glyphs: &[char] = match self {
            TaskKind::Copy | TaskKind::Reverse => &['0', '1'],
            TaskKind::Addition => &['0', '1', '+'],
            TaskKind::Mul2 => &['0', '1', '*'],
            TaskKind::Mul4 => &['0', '1', '2', '3', '*'],
            TaskKind::Mul10Bin => &['0', '1', 'o', 'i', '*'],
            TaskKind::Sort => &['0', '1', '2', '3', '4', '5'],
        };
        Alphabet::new(glyphs)
    }

    /// Token of the operator symbol for two-operand tasks.
    fn operator_token(self) -> usize {
        self.alphabet().len() - 1
    }

    /// Whether an input of exactly `len` tokens can be generated.
    ///
    /// Two-operand tasks use an even total number of operand digits, so the
    /// achievable lengths are `2kw + 1` for `w` tokens per digit.
    pub fn is_achievable(self, len: usize) -> bool {
        if self.is_two_operand() {
            let w = self.tokens_per_digit();
            len > 2 * w && (len - 1).is_multiple_of(2 * w)
        } else {
            len >= 1
        }
    }

    pub fn achievable_lengths(self, max_len: usize) -> Vec<usize> {
        (1..=max_len).filter(|&l| self.is_achievable(l)).collect()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(TaskKind::Addition),
            "mul" | "mul10" | "decimal" => Ok(TaskKind::Mul10Bin),
            _ => TaskKind::ALL
                .into_iter()
                .find(|k| k.name() == s)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown task '{s}' (expected one of copy, reverse, add, sort, mul2, mul4, mul10bin)"
                    ))
                }),
        }
    }
}

/// Ordered symbols; index 0 is always the pad symbol `_`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    glyphs: Vec<char>,
}

impl Alphabet {
    fn new(symbols: &[char]) -> Self {
        let mut glyphs = vec![PAD_GLYPH];
        glyphs.extend_from_slice(symbols);
        Alphabet { glyphs }
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn glyph(&self, token: usize) -> Option<char> {
        self.glyphs.get(token).copied()
    }

    pub fn token(&self, glyph: char) -> Option<usize> {
        self.glyphs.iter().position(|&g| g == glyph)
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.glyph(t).unwrap_or('?'))
            .collect()
    }

    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.token(c).ok_or_else(|| {
                    Error::Data(format!("symbol '{c}' is not in alphabet {:?}", self.glyphs))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub task: TaskKind,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Length before bin padding.
    pub len: usize,
}

impl Example {
    /// Current (possibly padded) length.
    pub fn bin_len(&self) -> usize {
        self.input.len()
    }
}

/// Little-endian digit vectors.
pub fn to_digits(mut value: u128, base: u32, width: usize) -> Vec<u8> {
    let mut d = Vec::with_capacity(width);
    for _ in 0..width {
        d.push((value % base as u128) as u8);
        value /= base as u128;
    }
    d
}

fn trim(mut d: Vec<u8>) -> Vec<u8> {
    while d.len() > 1 && d.last() == Some(&0) {
        d.pop();
    }
    d
}

/// Schoolbook product of little-endian digit vectors.
pub fn mul_digits(a: &[u8], b: &[u8], base: u32) -> Vec<u8> {
    let base = base as u64;
    let mut acc = vec![0u64; a.len() + b.len()];
    for (i, &x) in a.iter().enumerate() {
        if x == 0 {
            continue;
        }
        let mut carry = 0u64;
        for (j, &y) in b.iter().enumerate() {
            let cur = acc[i + j] + x as u64 * y as u64 + carry;
            acc[i + j] = cur % base;
            carry = cur / base;
        }
        let mut k = i + b.len();
        while carry > 0 {
            let cur = acc[k] + carry;
            acc[k] = cur % base;
            carry = cur / base;
            k += 1;
        }
    }
    trim(acc.into_iter().map(|v| v as u8).collect())
}

pub fn add_digits(a: &[u8], b: &[u8], base: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len().max(b.len()) + 1);
    let mut carry = 0u32;
    for i in 0..a.len().max(b.len()) {
        let s = *a.get(i).unwrap_or(&0) as u32 + *b.get(i).unwrap_or(&0) as u32 + carry;
        out.push((s % base) as u8);
        carry = s / base;
    }
    if carry > 0 {
        out.push(carry as u8);
    }
    trim(out)
}

fn digit_tokens(digits: &[u8]) -> Vec<usize> {
    digits.iter().map(|&d| d as usize + 1).collect()
}

/// Each decimal digit becomes its 4 bits, least significant first; the
/// first bit of every group uses the marked symbols `0*` / `1*`.
pub fn encode_decimal_binary(digits: &[u8]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(4 * digits.len());
    for &d in digits {
        if d > 9 {
            return Err(Error::Data(format!("decimal digit {d} out of range")));
        }
        for bit in 0..4 {
            let one = (d >> bit) & 1 == 1;
            out.push(match (bit == 0, one) {
                (true, false) => BIT0_START,
                (true, true) => BIT1_START,
                (false, false) => BIT0,
                (false, true) => BIT1,
            });
        }
    }
    Ok(out)
}

/// Strict inverse of [`encode_decimal_binary`].
pub fn decode_decimal_binary(tokens: &[usize]) -> Result<Vec<u8>> {
    if !tokens.len().is_multiple_of(4) {
        return Err(Error::Decode(format!(
            "{} tokens is not a whole number of 4-bit digits",
            tokens.len()
        )));
    }
    let mut digits = Vec::with_capacity(tokens.len() / 4);
    for (g, group) in tokens.chunks(4).enumerate() {
        let mut d = 0u8;
        for (bit, &t) in group.iter().enumerate() {
            let (marked, one) = match t {
                BIT0 => (false, false),
                BIT1 => (false, true),
                BIT0_START => (true, false),
                BIT1_START => (true, true),
                other => {
                    return Err(Error::Decode(format!(
                        "token {other} at position {} is not a bit symbol",
                        4 * g + bit
                    )))
                }
            };
            if marked != (bit == 0) {
                return Err(Error::Decode(format!(
                    "digit start marker misplaced at position {}",
                    4 * g + bit
                )));
            }
            d |= (one as u8) << bit;
        }
        if d > 9 {
            return Err(Error::Decode(format!("digit group {g} encodes {d}")));
        }
        digits.push(d);
    }
    Ok(digits)
}

fn render_operand(kind: TaskKind, digits: &[u8]) -> Result<Vec<usize>> {
    if kind == TaskKind::Mul10Bin {
        encode_decimal_binary(digits)
    } else {
        Ok(digit_tokens(digits))
    }
}

/// Example for explicit little-endian operand digits.
pub fn two_operand_example(kind: TaskKind, a: &[u8], b: &[u8]) -> Result<Example> {
    if !kind.is_two_operand() {
        return Err(Error::Config(format!("{kind} does not take two operands")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("operands need at least one digit".into()));
    }
    let base = kind.base();
    if a.iter().chain(b).any(|&d| d as u32 >= base) {
        return Err(Error::Data(format!("operand digit outside base {base}")));
    }
    let mut input = render_operand(kind, a)?;
    input.push(kind.operator_token());
    input.extend(render_operand(kind, b)?);
    let len = input.len();

    let result = match kind {
        TaskKind::Addition => add_digits(a, b, base),
        _ => mul_digits(a, b, base),
    };
    let mut target = if kind == TaskKind::Mul10Bin {
        let mut digits = result;
        digits.resize(a.len() + b.len(), 0);
        encode_decimal_binary(&digits)?
    } else {
        let mut t = digit_tokens(&result);
        t.resize(len, digit_tokens(&[0])[0]);
        t
    };
    // decimal targets are one digit-group short of the operator slot
    target.resize(len, PAD);
    Ok(Example {
        task: kind,
        input,
        target,
        len,
    })
}

fn random_digits<R: Rng + ?Sized>(count: usize, base: u32, rng: &mut R) -> Vec<u8> {
    (0..count).map(|_| rng.random_range(0..base) as u8).collect()
}

fn random_two_operand<R: Rng + ?Sized>(kind: TaskKind, da: usize, db: usize, rng: &mut R) -> Result<Example> {
    let base = kind.base();
    let a = random_digits(da, base, rng);
    let b = random_digits(db, base, rng);
    two_operand_example(kind, &a, &b)
}

pub fn gen_binary_mul<R: Rng + ?Sized>(bits_a: usize, bits_b: usize, rng: &mut R) -> Result<Example> {
    random_two_operand(TaskKind::Mul2, bits_a, bits_b, rng)
}

pub fn gen_base4_mul<R: Rng + ?Sized>(digits_a: usize, digits_b: usize, rng: &mut R) -> Result<Example> {
    random_two_operand(TaskKind::Mul4, digits_a, digits_b, rng)
}

pub fn gen_decimal_mul<R: Rng + ?Sized>(digits_a: usize, digits_b: usize, rng: &mut R) -> Result<Example> {
    random_two_operand(TaskKind::Mul10Bin, digits_a, digits_b, rng)
}

pub fn gen_addition<R: Rng + ?Sized>(bits_a: usize, bits_b: usize, rng: &mut R) -> Result<Example> {
    random_two_operand(TaskKind::Addition, bits_a, bits_b, rng)
}

/// Values are `0..=max_val`, stored as tokens `value + 1`.
pub fn gen_sort<R: Rng + ?Sized>(count: usize, max_val: u32, rng: &mut R) -> Result<Example> {
    if count == 0 {
        return Err(Error::Config("sort needs at least one value".into()));
    }
    if max_val as usize + 1 >= TaskKind::Sort.alphabet().len() {
        return Err(Error::Config(format!("sort values up to {max_val} exceed the alphabet")));
    }
    let input: Vec<usize> = (0..count)
        .map(|_| rng.random_range(0..=max_val) as usize + 1)
        .collect();
    let mut target = input.clone();
    target.sort();
    Ok(Example {
        task: TaskKind::Sort,
        input,
        target,
        len: count,
    })
}

fn gen_bits<R: Rng + ?Sized>(task: TaskKind, len: usize, rng: &mut R) -> Result<Example> {
    if len == 0 {
        return Err(Error::Config(format!("{task} needs a positive length")));
    }
    let input = digit_tokens(&random_digits(len, 2, rng));
    let mut target = input.clone();
    if task == TaskKind::Reverse {
        target.reverse();
    }
    Ok(Example {
        task,
        input,
        target,
        len,
    })
}

pub fn gen_copy<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Example> {
    gen_bits(TaskKind::Copy, len, rng)
}

pub fn gen_reverse<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Example> {
    gen_bits(TaskKind::Reverse, len, rng)
}

/// Generator for one task kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Largest value for the sort task.
    pub sort_max: u32,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec { kind, sort_max: 5 }
    }

    pub fn alphabet(&self) -> Alphabet {
        self.kind.alphabet()
    }

    /// One random example with input length exactly `len`. Two-operand
    /// tasks split the operand digits uniformly at random, each side >= 1.
    pub fn generate<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Example> {
        if !self.kind.is_achievable(len) {
            return Err(Error::Config(format!(
                "length {len} cannot be produced by task {}",
                self.kind
            )));
        }
        match self.kind {
            TaskKind::Copy => gen_copy(len, rng),
            TaskKind::Reverse => gen_reverse(len, rng),
            TaskKind::Sort => gen_sort(len, self.sort_max, rng),
            kind => {
                let digits = (len - 1) / kind.tokens_per_digit();
                let da = rng.random_range(1..digits);
                random_two_operand(kind, da, digits - da, rng)
            }
        }
    }

    /// Reference answer for an (unpadded) input.
    pub fn solve(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            TaskKind::Copy => Ok(input.to_vec()),
            TaskKind::Reverse => Ok(input.iter().rev().copied().collect()),
            TaskKind::Sort => {
                let mut t = input.to_vec();
                t.sort();
                Ok(t)
            }
            kind => {
                let op = kind.operator_token();
                let pos = input
                    .iter()
                    .position(|&t| t == op)
                    .ok_or_else(|| Error::Data("missing operator symbol".into()))?;
                let parse = |toks: &[usize]| -> Result<Vec<u8>> {
                    if kind == TaskKind::Mul10Bin {
                        decode_decimal_binary(toks)
                    } else {
                        toks.iter()
                            .map(|&t| {
                                if t >= 1 && t as u32 <= kind.base() {
                                    Ok((t - 1) as u8)
                                } else {
                                    Err(Error::Data(format!("token {t} is not a digit")))
                                }
                            })
                            .collect()
                    }
                };
                let a = parse(&input[..pos])?;
                let b = parse(&input[pos + 1..])?;
                Ok(two_operand_example(kind, &a, &b)?.target)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dataset {
    pub task: TaskKind,
    pub examples: Vec<Example>,
}

/// `per_length` examples for every achievable length up to `max_len`.
/// Each length draws from its own stream derived from `seed`.
pub fn build_dataset(spec: &TaskSpec, max_len: usize, per_length: usize, seed: u64) -> Result<Dataset> {
    if per_length == 0 {
        return Err(Error::Config("per-length example count must be positive".into()));
    }
    let mut examples = Vec::new();
    for len in spec.kind.achievable_lengths(max_len) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(len as u64);
        for _ in 0..per_length {
            examples.push(spec.generate(len, &mut rng)?);
        }
    }
    Ok(Dataset {
        task: spec.kind,
        examples,
    })
}

/// Pad to the smallest bin that holds the example.
pub fn bin_and_pad(example: &Example, bins: &[usize]) -> Result<Example> {
    let len = example.input.len();
    let n = bins.iter().copied().find(|&b| b >= len).ok_or_else(|| {
        Error::Data(format!(
            "example of length {len} does not fit the largest bin {:?}",
            bins.last()
        ))
    })?;
    let mut out = example.clone();
    out.input.resize(n, PAD);
    out.target.resize(n, PAD);
    Ok(out)
}

/// Training examples grouped by bin, already padded.
#[derive(Clone, Debug)]
pub struct BinnedDataset {
    pub bins: Vec<usize>,
    pub pools: Vec<Vec<Example>>,
}

impl BinnedDataset {
    pub fn new(dataset: &Dataset, bins: &[usize]) -> Result<Self> {
        let mut pools = vec![Vec::new(); bins.len()];
        for ex in &dataset.examples {
            let padded = bin_and_pad(ex, bins)?;
            let idx = bins.iter().position(|&b| b == padded.bin_len()).expect("bin exists");
            pools[idx].push(padded);
        }
        if let Some(i) = pools.iter().position(|p| p.is_empty()) {
            return Err(Error::Data(format!(
                "bin {} receives no examples from the {} dataset",
                bins[i], dataset.task
            )));
        }
        Ok(BinnedDataset {
            bins: bins.to_vec(),
            pools,
        })
    }

    /// `per_bin` examples drawn with replacement from every bin.
    pub fn sample<R: Rng + ?Sized>(&self, per_bin: usize, rng: &mut R) -> Vec<BinBatch> {
        self.bins
            .iter()
            .zip(&self.pools)
            .map(|(&n, pool)| {
                let mut inputs = Vec::with_capacity(per_bin * n);
                let mut targets = Vec::with_capacity(per_bin * n);
                for _ in 0..per_bin {
                    let ex = &pool[rng.random_range(0..pool.len())];
                    inputs.extend_from_slice(&ex.input);
                    targets.extend_from_slice(&ex.target);
                }
                BinBatch {
                    n,
                    batch: per_bin,
                    inputs,
                    targets,
                }
            })
            .collect()
    }
}

/// One example per line: `task<TAB>input glyphs<TAB>target glyphs`.
pub fn dump_dataset(dataset: &Dataset) -> String {
    let alphabet = dataset.task.alphabet();
    let mut out = String::new();
    for ex in &dataset.examples {
        out.push_str(ex.task.name());
        out.push('\t');
        out.push_str(&alphabet.render(&ex.input));
        out.push('\t');
        out.push_str(&alphabet.render(&ex.target));
        out.push('\n');
    }
    out
}

pub fn load_dataset(text: &str) -> Result<Dataset> {
    let mut task = None;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("line {}: expected 3 tab-separated fields", lineno + 1)));
        }
        let kind: TaskKind = fields[0].parse()?;
        if *task.get_or_insert(kind) != kind {
            return Err(Error::Data(format!("line {}: mixed tasks in one dataset", lineno + 1)));
        }
        let alphabet = kind.alphabet();
        let input = alphabet.parse(fields[1])?;
        let target = alphabet.parse(fields[2])?;
        if input.len() != target.len() {
            return Err(Error::Data(format!("line {}: input and target lengths differ", lineno + 1)));
        }
        let len = input.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
        examples.push(Example {
            task: kind,
            input,
            target,
            len,
        });
    }
    Ok(Dataset {
        task: task.ok_or_else(|| Error::Data("empty dataset".into()))?,
        examples,
    })
}
