//! Byte-level tokenizer with special tokens for sequence roles.
//!
//! The vocabulary is fixed: five special tokens followed by the 256 byte
//! values, 261 ids total. Encoding is pure byte mapping (`b -> b + 5`), so it
//! is deterministic, reversible, and needs no external vocabulary files.
//! Proof states are suffix-truncated (the open goal sits at the end), premises
//! are prefix-truncated (the name and statement head carry the signal).

/// Token id type. The vocabulary fits comfortably in 16 bits.
pub type Token = u16;

/// Padding token (defined for completeness; sequences are variable length).
pub const PAD: Token = 0;
/// Appended to proof-state sequences; its hidden state is the state embedding.
pub const EOS_STATE: Token = 1;
/// Appended to premise and pair sequences.
pub const EOS_PREMISE: Token = 2;
/// Separates state bytes from premise bytes in a pair encoding.
pub const SEP: Token = 3;
/// Begin-of-sequence token, used by the toy language-modeling objective.
pub const BOS: Token = 4;
/// First byte token; byte `b` maps to token `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: Token = 5;
/// Total vocabulary size: 5 specials + 256 bytes.
pub const VOCAB_SIZE: usize = 261;

/// Encodes raw bytes, mapping byte `b` to token `b + 5`. No specials inserted.
pub fn encode_bytes(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| Token::from(b) + BYTE_OFFSET).collect()
}

/// Encodes UTF-8 text byte-wise. No specials inserted.
pub fn encode(text: &str) -> Vec<Token> {
    encode_bytes(text.as_bytes())
}

/// Decodes byte tokens back to bytes. Special tokens (ids < 5) are skipped.
pub fn decode(tokens: &[Token]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t >= BYTE_OFFSET)
        .map(|&t| (t - BYTE_OFFSET) as u8)
        .collect()
}

/// Encodes a proof state: the last `ctx_len - 1` bytes followed by
/// [`EOS_STATE`]. The output always ends in `EOS_STATE` and never exceeds
/// `ctx_len` tokens.
pub fn encode_state(text: &str, ctx_len: usize) -> Vec<Token> {
    assert!(ctx_len >= 2, "state encoding needs room for a byte and EOS");
    let bytes = text.as_bytes();
    let keep = bytes.len().min(ctx_len - 1);
    let mut out = encode_bytes(&bytes[bytes.len() - keep..]);
    out.push(EOS_STATE);
    out
}

/// Encodes a premise: the first `ctx_len - 1` bytes followed by
/// [`EOS_PREMISE`].
pub fn encode_premise(text: &str, ctx_len: usize) -> Vec<Token> {
    assert!(ctx_len >= 2, "premise encoding needs room for a byte and EOS");
    let bytes = text.as_bytes();
    let keep = bytes.len().min(ctx_len - 1);
    let mut out = encode_bytes(&bytes[..keep]);
    out.push(EOS_PREMISE);
    out
}

/// Encodes a (state, premise) pair for cross-encoder scoring:
/// `state bytes, SEP, premise bytes, EOS_PREMISE`, at most `ctx_len` tokens.
///
/// When the pair does not fit, the state is suffix-truncated and the premise
/// prefix-truncated; the premise is granted at least half of the byte budget.
pub fn encode_pair(state_text: &str, premise_text: &str, ctx_len: usize) -> Vec<Token> {
    assert!(ctx_len >= 3, "pair encoding needs room for SEP, a byte, and EOS");
    let state = state_text.as_bytes();
    let premise = premise_text.as_bytes();
    let budget = ctx_len - 2; // SEP + EOS_PREMISE
    let premise_take = premise
        .len()
        .min((budget - budget / 2).max(budget.saturating_sub(state.len())));
    let state_take = state.len().min(budget - premise_take);
    let mut out = Vec::with_capacity(state_take + premise_take + 2);
    out.extend(encode_bytes(&state[state.len() - state_take..]));
    out.push(SEP);
    out.extend(encode_bytes(&premise[..premise_take]));
    out.push(EOS_PREMISE);
    out
}

/// The prompted form of a state text: the tactic name and a colon prepended.
pub fn tactic_prompt(state_text: &str, tactic_name: &str) -> String {
    assert!(!tactic_name.is_empty(), "tactic name must be non-empty");
    format!("{tactic_name}:{state_text}")
}

/// Encodes a proof state with a tactic prompt: the tactic name and a colon are
/// prepended to the state text before the usual state encoding.
pub fn encode_state_with_tactic(state_text: &str, tactic_name: &str, ctx_len: usize) -> Vec<Token> {
    encode_state(&tactic_prompt(state_text, tactic_name), ctx_len)
}
