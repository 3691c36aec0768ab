use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::Path;

use textstyle::corpus::load_image;
use textstyle::pipeline::{self, Model};
use textstyle::style::{self, synthesize};
use textstyle::{Corpus, Error, JointHeads, LossRecord, Result, Retriever};
use textstyle_service::{router, AppState, ServiceConfig};

use crate::config::RunConfig;
use crate::SplitArg;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn print_losses(rec: &LossRecord) {
    println!(
        "final losses: content {:e} style {:e} tv {:e} total {:e}",
        rec.content_loss, rec.style_loss, rec.tv_loss, rec.total
    );
}

fn progress(total: usize) -> impl FnMut(&LossRecord) {
    move |rec| {
        if rec.iteration % 20 == 0 || rec.iteration + 1 == total {
            log::info!("iteration {}/{} total loss {:e}", rec.iteration + 1, total, rec.total);
        }
    }
}

pub fn train_retrieval(cfg: &RunConfig, loss_csv: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(cfg.manifest())?;
    let settings = cfg.settings();
    let extractor = settings.extractor()?;
    let trained = pipeline::train_retrieval(&corpus, &settings, &cfg.train_config(), &extractor)?;
    let paths = cfg.artifacts();
    write_file(&paths.vocab, trained.encoder.to_json().as_bytes())?;
    write_file(&paths.heads, &trained.heads.to_bytes())?;
    if let Some(path) = loss_csv {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in trained.loss_curve.iter().enumerate() {
            writeln!(csv, "{},{l:e}", i + 1).expect("write to string");
        }
        write_file(path, csv.as_bytes())?;
    }
    let s = &trained.split;
    println!(
        "split: {} train, {} validation, {} test",
        s.train.len(),
        s.validation.len(),
        s.test.len()
    );
    println!(
        "vocabulary: {} comment tokens, {} title tokens",
        trained.encoder.comment.len(),
        trained.encoder.title.len()
    );
    if let (Some(first), Some(last)) = (trained.loss_curve.first(), trained.loss_curve.last()) {
        println!("loss: epoch 1 {first:.6}, epoch {} {last:.6}", trained.loss_curve.len());
    }
    Ok(())
}

pub fn build_index(cfg: &RunConfig, heads: Option<&Path>, weights_out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(cfg.manifest())?;
    let settings = cfg.settings();
    let extractor = settings.extractor()?;
    let (encoder, heads, trained) = match heads {
        Some(path) => {
            let split = pipeline::split(&corpus, settings.seed)?;
            let encoder = pipeline::build_encoder(&split.train, settings.min_count)?;
            (encoder, JointHeads::load(path)?, false)
        }
        None => {
            let t = pipeline::train_retrieval(&corpus, &settings, &cfg.train_config(), &extractor)?;
            (t.encoder, t.heads, true)
        }
    };
    let index = pipeline::build_index(&corpus, &corpus.samples, &encoder, &heads, &extractor, &settings)?;
    // Catches heads that do not fit this vocabulary before anything is written.
    let retriever = Retriever::new(encoder, heads, index)?;

    let paths = cfg.artifacts();
    write_file(&paths.vocab, retriever.encoder.to_json().as_bytes())?;
    if trained {
        write_file(&paths.heads, &retriever.heads.to_bytes())?;
    }
    write_file(&paths.index, &retriever.index.to_bytes())?;
    if let Some(path) = weights_out {
        write_file(path, &extractor.to_bytes())?;
    }
    println!("samples: {}", corpus.samples.len());
    println!(
        "vocabulary: {} comment tokens, {} title tokens",
        retriever.encoder.comment.len(),
        retriever.encoder.title.len()
    );
    println!(
        "index: {} images, {} dimensions",
        retriever.index.len(),
        retriever.index.dim()
    );
    Ok(())
}

pub fn eval_retrieval(cfg: &RunConfig, which: SplitArg) -> Result<()> {
    let retriever = cfg.artifacts().load_retriever()?;
    let corpus = Corpus::load(cfg.manifest())?;
    let queries = match which {
        SplitArg::All => corpus.samples.clone(),
        other => {
            let split = pipeline::split(&corpus, cfg.seed)?;
            match other {
                SplitArg::Train => split.train,
                SplitArg::Validation => split.validation,
                _ => split.test,
            }
        }
    };
    let m = pipeline::evaluate(&retriever, &queries)?;
    println!("queries {}", m.queries);
    println!("MR {}", m.median_rank);
    println!("R@1 {:.6}", m.recall_at_1);
    println!("R@5 {:.6}", m.recall_at_5);
    println!("R@10 {:.6}", m.recall_at_10);
    Ok(())
}

fn require_text(title: &str, description: &str) -> Result<()> {
    if title.trim().is_empty() && description.trim().is_empty() {
        return Err(Error::Validation("give a --title or a --description".into()));
    }
    Ok(())
}

pub fn retrieve(cfg: &RunConfig, title: &str, description: &str, k: usize) -> Result<()> {
    require_text(title, description)?;
    let retriever = cfg.artifacts().load_retriever()?;
    for (i, r) in retriever.rank(title, description, k)?.iter().enumerate() {
        println!("{}\t{}\t{:.6}", i + 1, r.id, r.score);
    }
    Ok(())
}

pub fn transfer(
    cfg: &RunConfig,
    content: &Path,
    style_path: &Path,
    out: &Path,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let config = cfg.style_config();
    let content = load_image(content, cfg.max_side)?;
    let style_img = load_image(style_path, cfg.max_side)?;
    let extractor = cfg.settings().extractor()?;
    let result = synthesize(&content, &style_img, &extractor, &config, progress(config.iterations))?;
    write_file(out, &result.image.to_png_bytes())?;
    if let Some(path) = loss_csv {
        write_file(path, style::history_csv(&result.history).as_bytes())?;
    }
    print_losses(&result.final_losses);
    Ok(())
}

pub fn pipeline(
    cfg: &RunConfig,
    content: &Path,
    title: &str,
    description: &str,
    style_id: Option<&str>,
    out: &Path,
    loss_csv: Option<&Path>,
) -> Result<()> {
    if style_id.is_none() {
        require_text(title, description)?;
    }
    let config = cfg.style_config();
    let model = Model::load(&cfg.artifacts(), cfg.manifest(), cfg.weights.as_deref(), cfg.max_side)?;
    let content = load_image(content, cfg.max_side)?;
    let result = model.pipeline(&content, title, description, style_id, &config, progress(config.iterations))?;
    write_file(out, &result.synthesis.image.to_png_bytes())?;
    if let Some(path) = loss_csv {
        write_file(path, style::history_csv(&result.synthesis.history).as_bytes())?;
    }
    if result.style_score.is_finite() {
        println!("style image: {} (score {:.6})", result.style_id, result.style_score);
    } else {
        println!("style image: {}", result.style_id);
    }
    print_losses(&result.synthesis.final_losses);
    Ok(())
}

pub fn serve(cfg: &RunConfig, addr: SocketAddr, service: ServiceConfig) -> Result<()> {
    let model = match Model::load(&cfg.artifacts(), cfg.manifest(), cfg.weights.as_deref(), cfg.max_side) {
        Ok(model) => Some(model),
        Err(e) => {
            log::warn!("serving without an index: {e}");
            None
        }
    };
    let io = |source| Error::Io {
        path: service.jobs_dir.clone(),
        source,
    };
    let state = AppState::new(model, &service).map_err(io)?;
    let app = router(state, &service);
    textstyle_service::serve_blocking(addr, app).map_err(|source| Error::Io {
        path: addr.to_string().into(),
        source,
    })
}
