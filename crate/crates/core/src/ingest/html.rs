//! HTML to markdown-ish text.
//!
//! Rules: `script`, `style`, `nav`, `noscript`, `template` and `head` are
//! dropped; `h1`..`h6` become `#` headings; anchors become `[text](href)`;
//! list items get a `- ` prefix; tables become pipe rows; every other
//! block element becomes its own paragraph. Whitespace inside paragraphs is
//! collapsed and paragraphs are separated by one blank line.

use ego_tree::NodeRef;
use scraper::{Html, Node, Selector};

const SKIPPED: &[&str] = &[
    "script", "style", "nav", "noscript", "template", "head", "iframe", "svg",
];

const BLOCKS: &[&str] = &[
    "address",
    "article",
    "aside",
    "blockquote",
    "body",
    "dd",
    "details",
    "dialog",
    "div",
    "dl",
    "dt",
    "fieldset",
    "figcaption",
    "figure",
    "footer",
    "form",
    "header",
    "hr",
    "html",
    "main",
    "ol",
    "p",
    "section",
    "summary",
    "ul",
];

/// Converts an HTML document to normalized text.
pub fn html_to_markdown(source: &str) -> String {
    let doc = Html::parse_document(source);
    let mut out = Writer::default();
    out.walk_children(doc.tree.root());
    out.finish()
}

/// Text of the first `<title>` element, if any.
pub fn html_title(source: &str) -> Option<String> {
    let doc = Html::parse_document(source);
    let selector = Selector::parse("title").ok()?;
    let title = doc.select(&selector).next()?.text().collect::<String>();
    let title = collapse(&title);
    (!title.is_empty()).then_some(title)
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Default)]
struct Writer {
    blocks: Vec<String>,
    inline: String,
}

impl Writer {
    fn finish(mut self) -> String {
        self.flush();
        self.blocks.join("\n\n")
    }

    fn flush(&mut self) {
        let text = collapse(&self.inline);
        self.inline.clear();
        if !text.is_empty() {
            self.blocks.push(text);
        }
    }

    fn walk_children(&mut self, node: NodeRef<'_, Node>) {
        for child in node.children() {
            self.walk(child);
        }
    }

    /// Renders the inline content of `node` as a single line.
    fn inline_of(node: NodeRef<'_, Node>) -> String {
        let mut sub = Writer::default();
        sub.walk_children(node);
        sub.flush();
        sub.blocks.join(" ")
    }

    fn walk(&mut self, node: NodeRef<'_, Node>) {
        match node.value() {
            Node::Text(text) => {
                self.inline.push_str(text);
            }
            Node::Element(el) => {
                let name = el.name();
                if SKIPPED.contains(&name) {
                    return;
                }
                match name {
                    "h1" | "h2" | "h3" | "h4" | "h5" | "h6" => {
                        self.flush();
                        let level = usize::from(name.as_bytes()[1] - b'0');
                        let text = Self::inline_of(node);
                        if !text.is_empty() {
                            self.blocks.push(format!("{} {}", "#".repeat(level), text));
                        }
                    }
                    "a" => {
                        let text = Self::inline_of(node);
                        match el.attr("href").map(str::trim) {
                            Some(href) if !href.is_empty() && !text.is_empty() => {
                                self.inline.push_str(&format!(" [{text}]({href}) "));
                            }
                            _ => {
                                self.inline.push(' ');
                                self.inline.push_str(&text);
                                self.inline.push(' ');
                            }
                        }
                    }
                    "br" => self.inline.push(' '),
                    "img" => {}
                    "li" => {
                        self.flush();
                        let first = self.blocks.len();
                        self.walk_children(node);
                        self.flush();
                        if let Some(block) = self.blocks.get_mut(first) {
                            block.insert_str(0, "- ");
                        }
                    }
                    "pre" => {
                        self.flush();
                        let text: String = node
                            .descendants()
                            .filter_map(|n| n.value().as_text().map(|t| t.to_string()))
                            .collect();
                        let text = text.trim_matches('\n');
                        if !text.trim().is_empty() {
                            self.blocks.push(format!("```\n{text}\n```"));
                        }
                    }
                    "table" => {
                        self.flush();
                        self.table(node);
                    }
                    _ if BLOCKS.contains(&name) => {
                        self.flush();
                        self.walk_children(node);
                        self.flush();
                    }
                    _ => self.walk_children(node),
                }
            }
            _ => self.walk_children(node),
        }
    }

    fn table(&mut self, table: NodeRef<'_, Node>) {
        let rows: Vec<Vec<String>> = table
            .descendants()
            .filter(|n| n.value().as_element().is_some_and(|e| e.name() == "tr"))
            .map(|tr| {
                tr.children()
                    .filter(|c| {
                        c.value()
                            .as_element()
                            .is_some_and(|e| matches!(e.name(), "td" | "th"))
                    })
                    .map(|cell| Self::inline_of(cell).replace('|', "\\|"))
                    .collect::<Vec<_>>()
            })
            .filter(|cells| !cells.is_empty())
            .collect();
        if rows.is_empty() {
            return;
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut lines = Vec::with_capacity(rows.len() + 1);
        for (i, row) in rows.iter().enumerate() {
            let mut cells = row.clone();
            cells.resize(width, String::new());
            lines.push(format!("| {} |", cells.join(" | ")));
            if i == 0 {
                lines.push(format!("|{}", " --- |".repeat(width)));
            }
        }
        self.blocks.push(lines.join("\n"));
    }
}
