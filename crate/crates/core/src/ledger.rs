//! Append-only privacy ledger.
//!
//! A ledger records, per round, one sampling event followed by the sum
//! queries run on that sample. Nothing here computes a guarantee; the
//! accountant reads the ledger afterwards, which is what keeps mechanism
//! configuration code out of the privacy calculation.
//!
//! # File format
//!
//! UTF-8, one record per line, every line terminated by `\n`:
//!
//! ```text
//! dpgroups-ledger 1
//! sample round=0 q=0x1.47ae147ae147bp-7 n=10000 policy=poisson
//! query round=0 group=weights clip=0x1p+0 sigma=0x1.199999999999ap+0
//! taint round=0 reason=zero-noise
//! close round=0
//! ```
//!
//! Reals are hex floats (see [`crate::hexfloat`]). A `taint` line, present
//! only for non-private rounds, sits directly before that round's `close`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{invalid, DpError, Result};
use crate::hexfloat;
use crate::mechanisms::{round_compose, EffectiveQuery};
use crate::sampling::{accounting_support, AccountingSupport, PolicyTag};
use crate::vector::PrivacyTuple;

pub const HEADER: &str = "dpgroups-ledger 1";
pub const ZERO_NOISE: &str = "zero-noise";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEvent {
    pub round_id: u64,
    pub q: f64,
    pub n: u64,
    pub policy: PolicyTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumQueryEvent {
    pub round_id: u64,
    pub group_name: String,
    pub clip: f64,
    pub sigma_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LedgerEntry {
    Sample(SampleEvent),
    SumQuery(SumQueryEvent),
}

/// Proof that a round is open; needed to record queries into it.
#[derive(Debug, PartialEq, Eq)]
pub struct RoundHandle {
    round_id: u64,
}

impl RoundHandle {
    pub fn round_id(&self) -> u64 {
        self.round_id
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    /// Non-private rounds and the first reason each was flagged.
    insecure: BTreeMap<u64, String>,
    open: Option<u64>,
    next_round: u64,
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b':' | b'/'));
    if ok {
        Ok(())
    } else {
        Err(invalid(format!(
            "`{name}` is not a valid ledger identifier"
        )))
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn insecure_rounds(&self) -> &BTreeMap<u64, String> {
        &self.insecure
    }

    pub fn is_private(&self) -> bool {
        self.insecure.is_empty()
    }

    pub fn open_round(&self) -> Option<u64> {
        self.open
    }

    /// Opens the next round with a sampling event.
    pub fn record_sample(&mut self, q: f64, n: u64, policy: PolicyTag) -> Result<RoundHandle> {
        if let Some(r) = self.open {
            return Err(DpError::Usage(format!("round {r} is still open")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(invalid(format!(
                "sampling probability must be in (0, 1], got {q}"
            )));
        }
        if n == 0 {
            return Err(invalid("database size must be at least 1"));
        }
        let round_id = self.next_round;
        self.entries.push(LedgerEntry::Sample(SampleEvent {
            round_id,
            q,
            n,
            policy,
        }));
        self.open = Some(round_id);
        self.next_round += 1;
        Ok(RoundHandle { round_id })
    }

    /// Appends a sum query to the open round. Zero noise is recorded and
    /// marks the round non-private.
    pub fn record_sum_query(
        &mut self,
        round: &RoundHandle,
        clip: f64,
        sigma_sum: f64,
        group_name: &str,
    ) -> Result<()> {
        self.check_open(round)?;
        check_name(group_name)?;
        PrivacyTuple::new(clip, sigma_sum)?;
        self.entries.push(LedgerEntry::SumQuery(SumQueryEvent {
            round_id: round.round_id,
            group_name: group_name.to_string(),
            clip,
            sigma_sum,
        }));
        if sigma_sum == 0.0 {
            self.mark_insecure(round, ZERO_NOISE)?;
        }
        Ok(())
    }

    /// Flags the open round as non-private, for example after a debug
    /// release of its sample size.
    pub fn mark_insecure(&mut self, round: &RoundHandle, reason: &str) -> Result<()> {
        self.check_open(round)?;
        check_name(reason)?;
        self.insecure
            .entry(round.round_id)
            .or_insert_with(|| reason.to_string());
        Ok(())
    }

    pub fn close_round(&mut self, round: RoundHandle) -> Result<()> {
        self.check_open(&round)?;
        self.open = None;
        Ok(())
    }

    fn check_open(&self, round: &RoundHandle) -> Result<()> {
        match self.open {
            Some(r) if r == round.round_id => Ok(()),
            _ => Err(DpError::Usage(format!(
                "round {} is not open",
                round.round_id
            ))),
        }
    }

    /// Canonical text form. Fails while a round is open.
    pub fn serialize(&self) -> Result<String> {
        if let Some(r) = self.open {
            return Err(DpError::Usage(format!(
                "cannot serialize with round {r} open"
            )));
        }
        let hex = |x: f64| hexfloat::format(x).expect("ledger values are finite");
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        let mut current: Option<u64> = None;
        let close = |out: &mut String, r: u64| {
            if let Some(reason) = self.insecure.get(&r) {
                out.push_str(&format!("taint round={r} reason={reason}\n"));
            }
            out.push_str(&format!("close round={r}\n"));
        };
        for e in &self.entries {
            match e {
                LedgerEntry::Sample(s) => {
                    if let Some(r) = current {
                        close(&mut out, r);
                    }
                    current = Some(s.round_id);
                    out.push_str(&format!(
                        "sample round={} q={} n={} policy={}\n",
                        s.round_id,
                        hex(s.q),
                        s.n,
                        s.policy
                    ));
                }
                LedgerEntry::SumQuery(qe) => out.push_str(&format!(
                    "query round={} group={} clip={} sigma={}\n",
                    qe.round_id,
                    qe.group_name,
                    hex(qe.clip),
                    hex(qe.sigma_sum)
                )),
            }
        }
        if let Some(r) = current {
            close(&mut out, r);
        }
        Ok(out)
    }

    /// Parses the canonical text form by replaying it through the recording
    /// API, so a parsed ledger satisfies every invariant a recorded one does.
    pub fn deserialize(text: &str) -> Result<Self> {
        Parser::new(text).run()
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        let text = self
            .serialize()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        std::fs::write(path, text)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::deserialize(&text)
    }
}

struct Parser<'a> {
    text: &'a str,
    line_no: usize,
    line: &'a str,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            line_no: 0,
            line: "",
        }
    }

    fn err_at(&self, token: &str, message: impl Into<String>) -> DpError {
        // Column of `token` within the current line, 1-based.
        let column = if token.is_empty() {
            self.line.len() + 1
        } else {
            token.as_ptr() as usize - self.line.as_ptr() as usize + 1
        };
        DpError::Parse {
            line: self.line_no,
            column,
            message: message.into(),
        }
    }

    fn field(&self, token: Option<&'a str>, key: &str) -> Result<&'a str> {
        let token = token.ok_or_else(|| self.err_at("", format!("missing `{key}=`")))?;
        token
            .strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .ok_or_else(|| self.err_at(token, format!("expected `{key}=`")))
    }

    fn real(&self, token: Option<&'a str>, key: &str) -> Result<f64> {
        let v = self.field(token, key)?;
        hexfloat::parse(v).map_err(|m| self.err_at(v, m))
    }

    fn int(&self, token: Option<&'a str>, key: &str) -> Result<u64> {
        let v = self.field(token, key)?;
        let canonical = !v.is_empty()
            && v.bytes().all(|b| b.is_ascii_digit())
            && (v == "0" || !v.starts_with('0'));
        if !canonical {
            return Err(self.err_at(v, format!("malformed integer `{v}`")));
        }
        v.parse()
            .map_err(|_| self.err_at(v, format!("integer out of range `{v}`")))
    }

    fn expect_round(&self, token: Option<&'a str>, want: Option<u64>) -> Result<u64> {
        let v = self.int(token, "round")?;
        match want {
            Some(w) if w != v => Err(self.err_at(
                self.field(token, "round")?,
                format!("event for round {v} inside round {w}"),
            )),
            _ => Ok(v),
        }
    }

    fn run(mut self) -> Result<Ledger> {
        if !self.text.is_empty() && !self.text.ends_with('\n') {
            let last = self.text.lines().count();
            return Err(DpError::Parse {
                line: last,
                column: self.text.lines().last().map_or(1, |l| l.len() + 1),
                message: "truncated: final line has no terminator".into(),
            });
        }
        let mut ledger = Ledger::new();
        let mut handle: Option<RoundHandle> = None;
        let mut tainted: Option<String> = None;
        let mut saw_header = false;
        for (i, line) in self.text.split_terminator('\n').enumerate() {
            self.line_no = i + 1;
            self.line = line;
            if !saw_header {
                if line != HEADER {
                    return Err(self.err_at(line, format!("expected header `{HEADER}`")));
                }
                saw_header = true;
                continue;
            }
            let mut tokens = line.split(' ');
            let kind = tokens.next().unwrap_or("");
            let open = handle.as_ref().map(|h| h.round_id);
            match kind {
                "sample" => {
                    if let Some(r) = open {
                        return Err(self.err_at(kind, format!("round {r} not closed")));
                    }
                    let round_tok = tokens.next();
                    let round = self.expect_round(round_tok, None)?;
                    if round != ledger.next_round {
                        return Err(self.err_at(
                            self.field(round_tok, "round")?,
                            format!("expected round {}, found {round}", ledger.next_round),
                        ));
                    }
                    let q_tok = tokens.next();
                    let q = self.real(q_tok, "q")?;
                    let n = self.int(tokens.next(), "n")?;
                    let p_tok = tokens.next();
                    let p = self.field(p_tok, "policy")?;
                    let policy: PolicyTag = p
                        .parse()
                        .map_err(|e: DpError| self.err_at(p, e.to_string()))?;
                    self.no_more(tokens.next())?;
                    handle = Some(
                        ledger
                            .record_sample(q, n, policy)
                            .map_err(|e| self.err_at(q_tok.unwrap_or(""), e.to_string()))?,
                    );
                }
                "query" => {
                    let h = handle
                        .as_ref()
                        .ok_or_else(|| self.err_at(kind, "query outside an open round"))?;
                    if tainted.is_some() {
                        return Err(self.err_at(kind, "query after taint"));
                    }
                    self.expect_round(tokens.next(), open)?;
                    let g_tok = tokens.next();
                    let group = self.field(g_tok, "group")?;
                    let clip = self.real(tokens.next(), "clip")?;
                    let sigma = self.real(tokens.next(), "sigma")?;
                    self.no_more(tokens.next())?;
                    ledger
                        .record_sum_query(h, clip, sigma, group)
                        .map_err(|e| self.err_at(group, e.to_string()))?;
                }
                "taint" => {
                    let h = handle
                        .as_ref()
                        .ok_or_else(|| self.err_at(kind, "taint outside an open round"))?;
                    if tainted.is_some() {
                        return Err(self.err_at(kind, "duplicate taint"));
                    }
                    self.expect_round(tokens.next(), open)?;
                    let reason = self.field(tokens.next(), "reason")?;
                    self.no_more(tokens.next())?;
                    let recorded = ledger.insecure.get(&h.round_id).cloned();
                    if recorded.as_deref().is_some_and(|r| r != reason) {
                        return Err(
                            self.err_at(reason, "taint reason disagrees with recorded events")
                        );
                    }
                    ledger
                        .mark_insecure(h, reason)
                        .map_err(|e| self.err_at(reason, e.to_string()))?;
                    tainted = Some(reason.to_string());
                }
                "close" => {
                    let h = handle
                        .take()
                        .ok_or_else(|| self.err_at(kind, "close outside an open round"))?;
                    self.expect_round(tokens.next(), open)?;
                    self.no_more(tokens.next())?;
                    if ledger.insecure.contains_key(&h.round_id) && tainted.is_none() {
                        return Err(
                            self.err_at(kind, "non-private round closed without taint line")
                        );
                    }
                    tainted = None;
                    ledger.close_round(h)?;
                }
                other => return Err(self.err_at(other, format!("unknown record `{other}`"))),
            }
        }
        if !saw_header {
            return Err(DpError::Parse {
                line: 1,
                column: 1,
                message: "empty input, missing header".into(),
            });
        }
        if let Some(h) = handle {
            return Err(DpError::Parse {
                line: self.line_no + 1,
                column: 1,
                message: format!("truncated: round {} never closed", h.round_id),
            });
        }
        Ok(ledger)
    }

    fn no_more(&self, token: Option<&str>) -> Result<()> {
        match token {
            None => Ok(()),
            Some(t) => Err(self.err_at(t, format!("unexpected field `{t}`"))),
        }
    }
}

/// Switches that relax what the accountant is willing to process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccountingOptions {
    /// Process rounds flagged non-private. Their rounds contribute infinite
    /// privacy loss and the result is marked non-private.
    pub allow_insecure: bool,
    /// Account fixed-size sampling as Poisson sampling at `q = b/n`.
    pub allow_fixed_size: bool,
}

impl Default for AccountingOptions {
    fn default() -> Self {
        Self {
            allow_insecure: false,
            allow_fixed_size: true,
        }
    }
}

/// One round in accountant form.
#[derive(Debug, Clone, PartialEq)]
pub struct FormalRound {
    pub round_id: u64,
    pub q: f64,
    pub policy: PolicyTag,
    pub support: AccountingSupport,
    /// `None` for a non-private round.
    pub query: Option<EffectiveQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormalLedger {
    pub rounds: Vec<FormalRound>,
    pub warnings: Vec<String>,
    pub non_private: bool,
}

/// Rewrites every round as its sampling rate plus one effective query with
/// unit noise. Rounds without sum queries are dropped with a warning.
pub fn formal_ledger(ledger: &Ledger, opts: AccountingOptions) -> Result<FormalLedger> {
    if let Some(r) = ledger.open {
        return Err(DpError::Usage(format!("round {r} is still open")));
    }
    if !ledger.insecure.is_empty() && !opts.allow_insecure {
        let list: Vec<String> = ledger
            .insecure
            .iter()
            .map(|(r, why)| format!("{r} ({why})"))
            .collect();
        return Err(DpError::Refusal(format!(
            "ledger contains non-private rounds: {}",
            list.join(", ")
        )));
    }
    let mut rounds = Vec::new();
    let mut warnings = Vec::new();
    let mut iter = ledger.entries.iter().peekable();
    while let Some(entry) = iter.next() {
        let LedgerEntry::Sample(s) = entry else {
            unreachable!("recording API guarantees a sample opens every round");
        };
        let mut tuples = Vec::new();
        while let Some(LedgerEntry::SumQuery(qe)) = iter.peek() {
            tuples.push(PrivacyTuple {
                clip: qe.clip,
                sigma_sum: qe.sigma_sum,
            });
            iter.next();
        }
        if tuples.is_empty() {
            warnings.push(format!("round {} has no sum queries; dropped", s.round_id));
            continue;
        }
        let query = if ledger.insecure.contains_key(&s.round_id) {
            None
        } else {
            Some(round_compose(&tuples)?)
        };
        rounds.push(FormalRound {
            round_id: s.round_id,
            q: s.q,
            policy: s.policy,
            support: accounting_support(s.policy, s.q, opts.allow_fixed_size),
            query,
        });
    }
    Ok(FormalLedger {
        rounds,
        warnings,
        non_private: !ledger.insecure.is_empty(),
    })
}
