//! Token-attribution heatmap reports: each token colored by its signed
//! score, detected tokens outlined, one column per checkpoint. Output is a
//! single self-contained HTML file, with an ANSI terminal rendering as the
//! fallback.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use agm_core::agm::{detect_spurious, eligible_positions};
use agm_core::attribution::grad_x_input;
use agm_core::data::{read_jsonl, Tokenizer, Vocab};
use agm_core::model::{Model, PAD_ID};
use agm_core::{Error, Result};

pub struct HeatmapArgs {
    pub checkpoints: Vec<PathBuf>,
    pub examples: PathBuf,
    pub vocab: PathBuf,
    pub out: PathBuf,
    pub tau_high: f64,
    pub ansi: bool,
}

/// Per-token record of the export interface.
#[derive(Debug, Clone, Serialize)]
pub struct HeatToken {
    pub token: String,
    pub score: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatRow {
    pub text: String,
    pub label: u8,
    pub predicted: u8,
    pub tokens: Vec<HeatToken>,
}

pub fn run(args: &HeatmapArgs) -> Result<()> {
    if args.checkpoints.is_empty() {
        return Err(Error::invalid("at least one checkpoint required"));
    }
    let models: Vec<(String, Model)> = args
        .checkpoints
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| p.display().to_string());
            Model::load(p).map(|m| (name, m))
        })
        .collect::<Result<_>>()?;
    let max_len = models[0].1.config.max_seq_len;
    for (name, m) in &models {
        if m.config.vocab_size != models[0].1.config.vocab_size {
            return Err(Error::schema(format!(
                "checkpoint {name} has a different vocabulary size"
            )));
        }
    }
    let vocab = Vocab::load(&args.vocab)?;
    if vocab.total_size() != models[0].1.config.vocab_size {
        return Err(Error::schema(format!(
            "vocabulary size {} does not match checkpoint vocab {}",
            vocab.total_size(),
            models[0].1.config.vocab_size
        )));
    }
    let tokenizer = Tokenizer::new(vocab, max_len);
    let examples = read_jsonl(&args.examples, &tokenizer, "example")?;
    if examples.is_empty() {
        return Err(Error::invalid("no examples to render"));
    }

    // One column of rows per checkpoint. The attribution target is the
    // model's own prediction: true labels may be absent at inference time.
    let mut columns: Vec<(String, Vec<HeatRow>)> = Vec::new();
    for (name, model) in &models {
        let mut rows = Vec::new();
        for e in &examples {
            let mask = e.mask();
            let predicted = model.predict_label(&e.tokens, &mask)?;
            let map = grad_x_input(model, &e.tokens, &mask, Some(predicted))?;
            let eligible = eligible_positions(&e.tokens);
            let flagged: Vec<usize> = if eligible.is_empty() {
                Vec::new()
            } else {
                detect_spurious(&map, args.tau_high, &eligible)?.flagged
            };
            let tokens = e
                .tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| HeatToken {
                    token: tokenizer.token_of(t).to_string(),
                    score: if t == PAD_ID { 0.0 } else { map.scores[i] },
                    flagged: flagged.contains(&i),
                })
                .collect();
            rows.push(HeatRow {
                text: e.text.clone(),
                label: e.label,
                predicted,
                tokens,
            });
        }
        columns.push((name.clone(), rows));
    }

    let html = render_html(&columns);
    std::fs::write(&args.out, html)?;
    println!("wrote {}", args.out.display());
    if args.ansi {
        print!("{}", render_ansi(&columns));
    }
    Ok(())
}

fn color_for(score: f64, max_abs: f64) -> String {
    if score == 0.0 || max_abs == 0.0 {
        return "background:#ffffff".to_string();
    }
    let intensity = (score.abs() / max_abs).clamp(0.0, 1.0);
    let level = (255.0 - intensity * 160.0) as u8;
    if score > 0.0 {
        format!("background:rgb(255,{level},{level})")
    } else {
        format!("background:rgb({level},{level},255)")
    }
}

fn render_html(columns: &[(String, Vec<HeatRow>)]) -> String {
    let n_rows = columns.first().map(|(_, r)| r.len()).unwrap_or(0);
    let mut out = String::from(
        "<!doctype html><html><head><meta charset=\"utf-8\">\
         <title>Token attribution heatmap</title><style>\
         body{font-family:sans-serif;margin:1.5em;}\
         table{border-collapse:collapse;}td,th{padding:6px;vertical-align:top;}\
         .tok{display:inline-block;margin:1px;padding:2px 4px;border-radius:3px;\
         border:1px solid transparent;}\
         .flagged{border:2px solid #222;font-weight:bold;}\
         .meta{color:#555;font-size:0.85em;}\
         </style></head><body><h1>Token attribution heatmap</h1>\
         <p class=\"meta\">Red: positive attribution. Blue: negative. \
         Outlined: detected as highly attributed.</p><table><tr>",
    );
    for (name, _) in columns {
        write!(out, "<th>{}</th>", html_escape(name)).expect("write");
    }
    out.push_str("</tr>");
    for row_idx in 0..n_rows {
        out.push_str("<tr>");
        for (_, rows) in columns {
            let row = &rows[row_idx];
            let max_abs = row
                .tokens
                .iter()
                .map(|t| t.score.abs())
                .fold(0.0f64, f64::max);
            out.push_str("<td>");
            write!(
                out,
                "<div class=\"meta\">label {} / predicted {}</div>",
                row.label, row.predicted
            )
            .expect("write");
            for t in &row.tokens {
                let class = if t.flagged { "tok flagged" } else { "tok" };
                write!(
                    out,
                    "<span class=\"{class}\" style=\"{}\" title=\"{:+.4}\">{}</span>",
                    color_for(t.score, max_abs),
                    t.score,
                    html_escape(&t.token)
                )
                .expect("write");
            }
            out.push_str("</td>");
        }
        out.push_str("</tr>");
    }
    out.push_str("</table></body></html>");
    out
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn render_ansi(columns: &[(String, Vec<HeatRow>)]) -> String {
    let mut out = String::new();
    let n_rows = columns.first().map(|(_, r)| r.len()).unwrap_or(0);
    for row_idx in 0..n_rows {
        for (name, rows) in columns {
            let row = &rows[row_idx];
            let max_abs = row
                .tokens
                .iter()
                .map(|t| t.score.abs())
                .fold(0.0f64, f64::max);
            write!(
                out,
                "{name} [label {} pred {}] ",
                row.label, row.predicted
            )
            .expect("write");
            for t in &row.tokens {
                if t.score == 0.0 || max_abs == 0.0 {
                    write!(out, "{} ", t.token).expect("write");
                    continue;
                }
                let intensity = (t.score.abs() / max_abs * 5.0).round().min(5.0) as u8;
                // 256-color ramp: reds 52..196 for positive, blues for negative.
                let code = if t.score > 0.0 {
                    [231u8, 224, 217, 210, 203, 196][intensity as usize]
                } else {
                    [231u8, 195, 153, 111, 69, 27][intensity as usize]
                };
                let marker = if t.flagged { "\u{1b}[1;4m" } else { "" };
                write!(
                    out,
                    "\u{1b}[38;5;{code}m{marker}{}\u{1b}[0m ",
                    t.token
                )
                .expect("write");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
