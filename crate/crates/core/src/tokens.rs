//! Shared text markers used across generation, rendering, and flattening.

/// Opening sentinel of an encoded-reference span in query text. The span body
/// is a tag surface form ("<instance i>" or "<the output of round i>"); the
/// markers make span replacement during flattening a pure string operation.
pub const ENC_OPEN: &str = "<|enc|>";

/// Closing sentinel of an encoded-reference span.
pub const ENC_CLOSE: &str = "<|/enc|>";

/// Tag surface form referring to the instance produced in round `i`.
pub fn instance_tag(round: u32) -> String {
    format!("<instance {round}>")
}

/// Tag surface form referring to the output of round `i`.
pub fn round_tag(round: u32) -> String {
    format!("<the output of round {round}>")
}

/// Wrap a tag in encoded-reference sentinels.
pub fn encoded_span(tag: &str) -> String {
    format!("{ENC_OPEN}{tag}{ENC_CLOSE}")
}
