use std::io::{self, Read, Write};

use crate::clock::Timestamp;
use crate::reading::SensorReading;

pub const EXPORT_HEADER: [&str; 9] = [
    "pseudonym",
    "endpoint",
    "object",
    "instance",
    "resource",
    "value",
    "unit",
    "device_time",
    "server_time",
];

/// Writes readings as CSV with RFC 3339 millisecond timestamps.
pub fn export_csv<W: Write>(readings: &[SensorReading], out: W) -> io::Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EXPORT_HEADER)?;
    for r in readings {
        w.write_record([
            r.pseudonym.as_str(),
            r.endpoint.as_str(),
            &r.object_id.to_string(),
            &r.instance.to_string(),
            &r.resource.to_string(),
            &r.value.to_string(),
            r.unit.as_str(),
            &r.device_time.to_rfc3339(),
            &r.server_time.to_rfc3339(),
        ])?;
    }
    w.flush()?;
    Ok(readings.len())
}

/// Parses an export back into readings. The site token is the endpoint
/// prefix before the first `-`.
pub fn parse_export<R: Read>(input: R) -> io::Result<Vec<SensorReading>> {
    let bad = |line: u64, why: String| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {why}"))
    };
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(io::Error::from)?.clone();
    if headers.iter().collect::<Vec<_>>() != EXPORT_HEADER {
        return Err(bad(1, format!("unexpected header {headers:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(io::Error::from)?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> io::Result<u16> {
            rec[i].parse().map_err(|_| bad(line, format!("bad {}", EXPORT_HEADER[i])))
        };
        let time = |i: usize| -> io::Result<Timestamp> {
            Timestamp::parse_rfc3339(&rec[i])
                .ok_or_else(|| bad(line, format!("bad {}", EXPORT_HEADER[i])))
        };
        let endpoint = rec[1].to_string();
        out.push(SensorReading {
            pseudonym: rec[0].to_string(),
            site: endpoint
                .split_once('-')
                .map(|(s, _)| s.to_string())
                .unwrap_or_default(),
            endpoint,
            object_id: num(2)?,
            instance: num(3)?,
            resource: num(4)?,
            value: rec[5].parse().map_err(|_| bad(line, "bad value".into()))?,
            unit: rec[6].to_string(),
            device_time: time(7)?,
            server_time: time(8)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_export_is_header_only() {
        let mut buf = Vec::new();
        export_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "pseudonym,endpoint,object,instance,resource,value,unit,device_time,server_time\n"
        );
    }

    #[test]
    fn round_trip() {
        let r = SensorReading {
            pseudonym: "ab".repeat(16),
            endpoint: format!("{}-egg-017", "cd".repeat(16)),
            object_id: 3303,
            instance: 0,
            resource: 5700,
            value: 0.1 + 0.2,
            unit: "°C".into(),
            device_time: Timestamp(1_704_067_203_123),
            server_time: Timestamp(1_704_067_203_124),
            site: "cd".repeat(16),
        };
        let mut buf = Vec::new();
        export_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        assert_eq!(parse_export(&buf[..]).unwrap(), vec![r]);
    }
}
