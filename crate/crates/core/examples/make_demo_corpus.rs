//! Renders the synthetic planted-secret corpus as JSONL text plus the spec
//! files for a two-stage demo: pretrain on background text, then fine-tune
//! and compare mitigation strategies.
//!
//!     cargo run --release -p memaudit --example make_demo_corpus -- demo
//!     target/release/memaudit sweep --spec demo/pretrain.spec
//!     target/release/memaudit sweep --spec demo/finetune.spec
//!     target/release/memaudit report --dir demo/runs

use std::fmt::Write as _;
use std::path::Path;

use memaudit::corpus::Corpus;
use memaudit::synthetic::SecretCorpusConfig;

fn render_jsonl(corpus: &Corpus, alphabet: &[u8]) -> String {
    let mut out = String::new();
    for sample in &corpus.samples {
        let text: String = sample.iter().map(|&t| alphabet[(t - 1) as usize] as char).collect();
        writeln!(out, "{}", serde_json::json!({ "text": text })).unwrap();
    }
    out
}

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo".to_string());
    let dir = Path::new(&dir);
    std::fs::create_dir_all(dir).expect("cannot create output directory");

    // token ids 1..=63 map onto 63 printable bytes; the byte tokeniser
    // recovers them as distinct ids below the model's 256-way vocabulary
    let alphabet: Vec<u8> = (b'A'..=b'Z')
        .chain(b'a'..=b'z')
        .chain(b'0'..=b'9')
        .chain(std::iter::once(b' '))
        .collect();

    // longer flanks than the test corpus so the default prefix lengths
    // (up to 20 tokens) always fit
    let cfg = SecretCorpusConfig { min_flank: 8, max_flank: 20, ..Default::default() };
    let train = cfg.build_train();
    let val = cfg.build_val(50, 0.0, 0.0);
    let pretrain = cfg.build_pretrain(300);

    std::fs::write(dir.join("train.jsonl"), render_jsonl(&train, &alphabet)).unwrap();
    std::fs::write(dir.join("val.jsonl"), render_jsonl(&val, &alphabet)).unwrap();
    std::fs::write(dir.join("pretrain.jsonl"), render_jsonl(&pretrain, &alphabet)).unwrap();

    // vocab 123 covers every byte the alphabet uses; clip and epoch counts
    // are sized so the secret memorises visibly within the run
    let pretrain_spec = format!(
        "train_corpus = {d}/pretrain.jsonl\nval_corpus = {d}/val.jsonl\n\
         out_dir = {d}/pretrain_runs\nseeds = 0\nmodes = plain\nmax_epochs = 6\n\
         learning_rate = 0.1\nclip_norm = 1.5\nvocab_size = 123\nk_values = 12,16,20\n\
         suffix_len = 20\nstop_criterion = best_val\nhalt = false\n",
        d = dir.display()
    );
    std::fs::write(dir.join("pretrain.spec"), pretrain_spec).unwrap();

    let finetune_spec = format!(
        "train_corpus = {d}/train.jsonl\nval_corpus = {d}/val.jsonl\nout_dir = {d}/runs\n\
         seeds = 0,1,2,3,4\nmodes = plain,ngram_reg,goldfish\ngoldfish_period = 4\n\
         penalty_sizes = 1,2,3\nlambda = 10\ntau = 0.05\nmax_epochs = 12\nlearning_rate = 0.1\n\
         clip_norm = 1.5\nvocab_size = 123\nk_values = 12,16,20\nsuffix_len = 20\n\
         ngram_sizes = 4,5,6\nstop_criterion = ngram_threshold\nthreshold = 20\nhalt = false\n\
         init_checkpoint = {d}/pretrain_runs/plain/seed_0/checkpoint_selected.json\n",
        d = dir.display()
    );
    std::fs::write(dir.join("finetune.spec"), finetune_spec).unwrap();

    println!(
        "wrote {} train / {} val / {} pretrain samples and two spec files under {}",
        train.len(),
        val.len(),
        pretrain.len(),
        dir.display()
    );
}
