//! Byte-stable JSON: object keys sorted, floats with 17 significant digits.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;
use serde_json::Value;

struct FixedFloat;

impl Formatter for FixedFloat {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes through [`Value`] (whose maps are ordered by key) and prints
/// every float as `d.ddddddddddddddddde±x`.
pub fn to_canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let value: Value = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloat);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}
