use super::{BBox, Expertise, GradeDomain, GradePair, Session, TelemetryError, ViewportSample};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Header {
        session_id: String,
        pathologist_id: String,
        wsi_id: String,
        expertise: Expertise,
        primary_grade: Option<i64>,
        secondary_grade: Option<i64>,
        confidence: Option<f64>,
    },
    Sample {
        t_ms: u64,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        mag: f64,
    },
}

/// Parses a JSON Lines session log with the default grade domain.
pub fn parse_session_log(bytes: &[u8]) -> Result<Session, TelemetryError> {
    parse_session_log_with(bytes, &GradeDomain::default())
}

pub fn parse_session_log_with(bytes: &[u8], domain: &GradeDomain) -> Result<Session, TelemetryError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TelemetryError::MalformedRecord {
        line: 0,
        reason: format!("invalid UTF-8: {e}"),
    })?;

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) = lines.next().ok_or(TelemetryError::MalformedRecord {
        line: 1,
        reason: "missing header".into(),
    })?;
    let header: Record = parse_record(header_line, header)?;
    let Record::Header {
        session_id,
        pathologist_id,
        wsi_id,
        expertise,
        primary_grade,
        secondary_grade,
        confidence,
    } = header
    else {
        return Err(TelemetryError::MalformedRecord {
            line: header_line,
            reason: "first record must be a header".into(),
        });
    };

    let grade = match (primary_grade, secondary_grade) {
        (None, None) => None,
        (Some(p), Some(s)) => {
            let check = |g: i64| -> Result<u8, TelemetryError> {
                u8::try_from(g)
                    .ok()
                    .filter(|g| domain.contains(*g))
                    .ok_or(TelemetryError::GradeOutOfDomain { grade: g })
            };
            if let Some(c) = confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(TelemetryError::MalformedRecord {
                        line: header_line,
                        reason: format!("confidence {c} outside [0,1]"),
                    });
                }
            }
            Some(GradePair {
                primary: check(p)?,
                secondary: check(s)?,
                confidence,
            })
        }
        _ => {
            return Err(TelemetryError::MalformedRecord {
                line: header_line,
                reason: "primary and secondary grade must both be present or both null".into(),
            })
        }
    };

    let mut samples = Vec::new();
    for (line, raw) in lines {
        match parse_record(line, raw)? {
            Record::Sample {
                t_ms,
                x0,
                y0,
                x1,
                y1,
                mag,
            } => {
                let bbox = BBox { x0, y0, x1, y1 };
                if !bbox.is_valid() {
                    return Err(TelemetryError::BadCoordinate { line });
                }
                if !(mag.is_finite() && mag > 0.0) {
                    return Err(TelemetryError::BadMagnification { line });
                }
                if let Some(prev) = samples.last().map(|s: &ViewportSample| s.t_ms) {
                    if t_ms <= prev {
                        return Err(TelemetryError::NonMonotonicTime { line });
                    }
                }
                samples.push(ViewportSample { t_ms, bbox, mag });
            }
            Record::Header { .. } => {
                return Err(TelemetryError::MalformedRecord {
                    line,
                    reason: "duplicate header".into(),
                });
            }
        }
    }

    Session::new(session_id, pathologist_id, wsi_id, expertise, samples, grade)
}

fn parse_record(line: usize, raw: &str) -> Result<Record, TelemetryError> {
    serde_json::from_str(raw).map_err(|e| TelemetryError::MalformedRecord {
        line,
        reason: e.to_string(),
    })
}

/// Serializes a session to its JSON Lines form (trailing newline included).
pub fn write_session_log(session: &Session) -> String {
    let header = Record::Header {
        session_id: session.session_id.clone(),
        pathologist_id: session.pathologist_id.clone(),
        wsi_id: session.wsi_id.clone(),
        expertise: session.expertise,
        primary_grade: session.grade.map(|g| g.primary as i64),
        secondary_grade: session.grade.map(|g| g.secondary as i64),
        confidence: session.grade.and_then(|g| g.confidence),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in session.samples() {
        let rec = Record::Sample {
            t_ms: s.t_ms,
            x0: s.bbox.x0,
            y0: s.bbox.y0,
            x1: s.bbox.x1,
            y1: s.bbox.y1,
            mag: s.mag,
        };
        out.push_str(&serde_json::to_string(&rec).expect("sample serializes"));
        out.push('\n');
    }
    out
}
