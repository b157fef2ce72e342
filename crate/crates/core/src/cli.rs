//! Command-line front end. Every command reads the run configuration, works
//! on files under `paths.output`, and writes artifacts with a header line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::artifact::{ensure_exists, read_jsonl, write_jsonl, write_text, Header};
use crate::config::{DecodeStrategy, RunConfig};
use crate::data::{
    corpus_stats, gold_concepts, load_dataset, EmbeddingTable, KnowledgeEdgeList, SequenceRecord, Split, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{benchmark, PlannerRun};
use crate::graph::{graph_for_record, CandidateGraph};
use crate::mcsm::McsmModel;
use crate::neural::{ParamStore, Tensor};
use crate::pipeline::{
    i2c_vocabulary, plan_concepts, plan_i2c, plan_mcsm, plan_rand, plan_ssm, prepare_with_graph, train_i2c,
    train_mcsm, train_ssm, PreparedSequence,
};
use crate::planner::{read_plans, write_plans, PlanRecord, PlannerDims};
use crate::realizer::{
    beam_decode, external_realize_all, greedy_decode, nucleus_decode, read_stories, template_realize, train_realizer,
    write_stories, RealizerDims, RealizerModel, RealizerSample, RealizerTraining, StoryDraft,
};
use crate::selftest;
use crate::ssm::{I2cModel, SsmModel};
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "storyplan", version, about = "Concept planning and story realization for image sequences")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.mcsm.epochs=40`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rand,
    I2c,
    Ssm,
    Mcsm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rand => "rand",
            Method::I2c => "i2c",
            Method::Ssm => "ssm",
            Method::Mcsm => "mcsm",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build candidate graphs for the train and test splits.
    BuildGraph,
    /// Train one planner on the train split.
    TrainPlanner {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Select concepts for every test sequence.
    Plan {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Train the story realizer on gold concepts of the train split.
    TrainRealizer,
    /// Turn a plan file into stories.
    Realize {
        #[arg(long, value_enum, default_value = "mcsm")]
        method: Method,
        /// Overrides `realizer.strategy`.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Score plan files against the test gold stories.
    Evaluate {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "mcsm")]
        methods: Vec<Method>,
    },
    /// Write the planted-correlation benchmark.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the clique oracle and gradient checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Beam,
    Nucleus,
    Template,
    External,
}

impl From<StrategyArg> for DecodeStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Greedy => DecodeStrategy::Greedy,
            StrategyArg::Beam => DecodeStrategy::Beam,
            StrategyArg::Nucleus => DecodeStrategy::Nucleus,
            StrategyArg::Template => DecodeStrategy::Template,
            StrategyArg::External => DecodeStrategy::External,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ws = Workspace { cfg };
    match &cli.command {
        Command::BuildGraph => ws.build_graph(),
        Command::TrainPlanner { method } => ws.train_planner(*method),
        Command::Plan { method } => ws.plan(*method),
        Command::TrainRealizer => ws.train_realizer(),
        Command::Realize { method, strategy } => ws.realize(*method, strategy.map(Into::into)),
        Command::Evaluate { methods } => ws.evaluate(methods),
        Command::SynthData { out, sequences, seed } => synth_data(&ws.cfg, out, *sequences, *seed),
        Command::Selftest => selftest_command(),
    }
}

/// Saved next to a planner checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerMeta {
    pub method: Method,
    pub dims: PlannerDims,
    #[serde(default)]
    pub vocabulary: Vec<String>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealizerMeta {
    pub dims: RealizerDims,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRecord {
    tokens: Vec<String>,
}

/// File layout under `paths.output`.
pub mod files {
    pub fn graphs(split: &str) -> String {
        format!("graphs-{split}.jsonl")
    }
    pub fn planner_checkpoint(method: &str) -> String {
        format!("planner-{method}.ckpt")
    }
    pub fn planner_meta(method: &str) -> String {
        format!("planner-{method}.jsonl")
    }
    pub fn plans(method: &str) -> String {
        format!("plans-{method}.jsonl")
    }
    pub fn stories(method: &str) -> String {
        format!("stories-{method}.jsonl")
    }
    pub const REALIZER_CHECKPOINT: &str = "realizer.ckpt";
    pub const REALIZER_META: &str = "realizer.jsonl";
    pub const VOCAB: &str = "vocab.jsonl";
    pub const REPORT_TSV: &str = "report.tsv";
    pub const REPORT_JSON: &str = "report.json";
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

struct Workspace {
    cfg: RunConfig,
}

impl Workspace {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.output.join(name)
    }

    fn header(&self, artifact: &str) -> Header {
        Header::new(artifact, self.cfg.seed)
    }

    fn records(&self, split: Split) -> Result<Vec<SequenceRecord>> {
        let path = match split {
            Split::Train => &self.cfg.paths.train,
            Split::Test => &self.cfg.paths.test,
        };
        load_dataset(path, split)
    }

    fn words(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::load(&self.cfg.paths.embeddings)
    }

    fn graphs(&self, split: Split) -> Result<Vec<CandidateGraph>> {
        Ok(read_jsonl(&self.out(&files::graphs(split_name(split))))?.1)
    }

    fn prepared(&self, split: Split, words: &EmbeddingTable) -> Result<Vec<PreparedSequence>> {
        let records = self.records(split)?;
        let graphs = self.graphs(split)?;
        if graphs.len() != records.len() {
            return Err(Error::Schema(format!(
                "{} graphs for {} {} records; rerun build-graph",
                graphs.len(),
                records.len(),
                split_name(split)
            )));
        }
        records
            .iter()
            .zip(graphs)
            .map(|(rec, g)| {
                if g.sequence_id != rec.sequence_id {
                    return Err(Error::Schema(format!(
                        "graph {} does not match record {}; rerun build-graph",
                        g.sequence_id, rec.sequence_id
                    )));
                }
                prepare_with_graph(rec, g, words)
            })
            .collect()
    }

    fn dims(&self, data: &[PreparedSequence], words: &EmbeddingTable) -> PlannerDims {
        let m = &self.cfg.model;
        PlannerDims {
            feature_dim: data.first().map_or(0, |p| p.input.features.cols()),
            word_dim: words.dim(),
            emb_dim: m.emb_dim,
            hidden_dim: m.hidden_dim,
            heads: m.heads,
            max_images: m.max_images,
        }
    }

    fn build_graph(&self) -> Result<()> {
        let train = self.records(Split::Train)?;
        let test = self.records(Split::Test)?;
        let kb = KnowledgeEdgeList::load(&self.cfg.paths.kb)?;
        let stats = corpus_stats(&train);
        for (split, records) in [(Split::Train, &train), (Split::Test, &test)] {
            let graphs: Vec<CandidateGraph> = records
                .iter()
                .map(|r| graph_for_record(r, &kb, &stats, &self.cfg.graph, self.cfg.seed))
                .collect();
            let nodes: usize = graphs.iter().map(CandidateGraph::node_count).sum();
            let path = self.out(&files::graphs(split_name(split)));
            write_jsonl(&path, &self.header("graphs").with("k", self.cfg.graph.k), &graphs)?;
            println!("{}: {} graphs, {nodes} nodes -> {}", split_name(split), graphs.len(), path.display());
        }
        Ok(())
    }

    fn train_planner(&self, method: Method) -> Result<()> {
        let words = self.words()?;
        let data = self.prepared(Split::Train, &words)?;
        let dims = self.dims(&data, &words);
        let mut store = ParamStore::new(self.cfg.seed);
        let (losses, vocabulary) = match method {
            Method::Rand => {
                return Err(Error::Config("the random baseline has nothing to train".into()));
            }
            Method::Ssm => {
                let m = SsmModel::new(&mut store, dims);
                (train_ssm(&mut store, &m, &data, &self.cfg.train.ssm.options(self.cfg.seed))?, Vec::new())
            }
            Method::Mcsm => {
                let m = McsmModel::new(&mut store, dims, self.cfg.mcsm.weights);
                (train_mcsm(&mut store, &m, &data, &self.cfg.train.mcsm.options(self.cfg.seed))?, Vec::new())
            }
            Method::I2c => {
                let vocab = i2c_vocabulary(&data);
                let m = I2cModel::new(&mut store, dims, vocab.clone());
                (train_i2c(&mut store, &m, &data, &self.cfg.train.i2c.options(self.cfg.seed))?, vocab)
            }
        };
        let ckpt = self.out(&files::planner_checkpoint(method.name()));
        std::fs::create_dir_all(&self.cfg.paths.output).map_err(|e| Error::io(&self.cfg.paths.output, e))?;
        store.save(&ckpt)?;
        let meta = PlannerMeta {
            method,
            dims,
            vocabulary,
            losses: losses.clone(),
        };
        write_jsonl(&self.out(&files::planner_meta(method.name())), &self.header("planner"), &[meta])?;
        println!(
            "{}: {} epochs, final loss {:.6} -> {}",
            method.name(),
            losses.len(),
            losses.last().copied().unwrap_or(f64::NAN),
            ckpt.display()
        );
        Ok(())
    }

    fn load_planner(&self, method: Method) -> Result<(ParamStore, PlannerMeta)> {
        let store = ParamStore::load(&self.out(&files::planner_checkpoint(method.name())))?;
        let (_, metas): (_, Vec<PlannerMeta>) = read_jsonl(&self.out(&files::planner_meta(method.name())))?;
        let meta = metas
            .into_iter()
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("{} metadata is empty", method.name())))?;
        Ok((store, meta))
    }

    fn plan(&self, method: Method) -> Result<()> {
        let words = self.words()?;
        let data = self.prepared(Split::Test, &words)?;
        let plans: Vec<PlanRecord> = match method {
            Method::Rand => data.iter().map(|p| plan_rand(p, self.cfg.seed)).collect(),
            Method::Ssm => {
                let (mut store, meta) = self.load_planner(method)?;
                let m = SsmModel::new(&mut ParamStore::new(0), meta.dims);
                store.zero_grad();
                data.iter()
                    .map(|p| plan_ssm(&m, &store, p, self.cfg.ssm.t_max))
                    .collect::<Result<_>>()?
            }
            Method::Mcsm => {
                let (store, meta) = self.load_planner(method)?;
                let m = McsmModel::new(&mut ParamStore::new(0), meta.dims, self.cfg.mcsm.weights);
                data.iter()
                    .map(|p| plan_mcsm(&m, &store, p, &self.cfg.mcsm.tau))
                    .collect::<Result<_>>()?
            }
            Method::I2c => {
                let (store, meta) = self.load_planner(method)?;
                let m = I2cModel::new(&mut ParamStore::new(0), meta.dims, meta.vocabulary);
                data.iter().map(|p| plan_i2c(&m, &store, p)).collect::<Result<_>>()?
            }
        };
        let path = self.out(&files::plans(method.name()));
        write_plans(&path, &self.header("plans").with("method", method.name()), &plans)?;
        println!("{}: {} plans -> {}", method.name(), plans.len(), path.display());
        Ok(())
    }

    fn realizer_samples(&self, records: &[SequenceRecord], vocab: &Vocabulary) -> Result<Vec<RealizerSample>> {
        records
            .iter()
            .map(|rec| {
                let rows: Vec<Vec<f64>> = rec.images.iter().map(|i| i.feature.clone()).collect();
                let features = Tensor::from_rows(&rows)?;
                let candidates: BTreeSet<&str> =
                    rec.images.iter().flat_map(|i| i.seed_concepts.iter().map(String::as_str)).collect();
                let mut concepts = Vec::new();
                let mut sentences = Vec::new();
                for story in &rec.gold_stories {
                    let gold = gold_concepts(story);
                    concepts.push(
                        story
                            .iter()
                            .map(|sentence| {
                                let mut seen = BTreeSet::new();
                                sentence
                                    .iter()
                                    .filter(|t| gold.contains(*t) && candidates.contains(t.as_str()))
                                    .filter(|t| seen.insert(t.as_str()))
                                    .cloned()
                                    .collect()
                            })
                            .collect(),
                    );
                    sentences.push(story.iter().map(|s| vocab.encode(s)).collect());
                }
                Ok(RealizerSample {
                    features,
                    concepts,
                    sentences,
                })
            })
            .collect()
    }

    fn train_realizer(&self) -> Result<()> {
        let records = self.records(Split::Train)?;
        let words = self.words()?;
        let r = &self.cfg.realizer;
        let vocab = Vocabulary::build(&records, r.vocab_cap)?;
        let dims = RealizerDims {
            feature_dim: records.first().map_or(0, SequenceRecord::feature_dim),
            word_dim: words.dim(),
            emb_dim: self.cfg.model.emb_dim,
            hidden_dim: self.cfg.model.hidden_dim,
            heads: self.cfg.model.heads,
            vocab_size: vocab.len(),
            max_images: self.cfg.model.max_images,
        };
        let mut store = ParamStore::new(self.cfg.seed);
        let model = RealizerModel::new(&mut store, dims);
        let samples = self.realizer_samples(&records, &vocab)?;
        let opts = crate::config::TrainConfig {
            epochs: r.epochs,
            lr: r.lr,
            ..crate::config::TrainConfig::default()
        }
        .options(self.cfg.seed);
        let training = RealizerTraining {
            noise: r.noise,
            blinding: r.blinding,
            max_sentence_len: r.max_sentence_len,
        };
        let report = train_realizer(&mut store, &model, &samples, &vocab, &words, &opts, &training)?;
        std::fs::create_dir_all(&self.cfg.paths.output).map_err(|e| Error::io(&self.cfg.paths.output, e))?;
        store.save(&self.out(files::REALIZER_CHECKPOINT))?;
        write_jsonl(
            &self.out(files::VOCAB),
            &self.header("vocab"),
            &[VocabRecord {
                tokens: vocab.tokens().to_vec(),
            }],
        )?;
        let meta = RealizerMeta {
            dims,
            losses: report.losses.clone(),
        };
        write_jsonl(&self.out(files::REALIZER_META), &self.header("realizer"), &[meta])?;
        println!(
            "realizer: {} epochs, final loss {:.6}",
            report.losses.len(),
            report.losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    }

    fn load_realizer(&self) -> Result<(ParamStore, RealizerModel, Vocabulary)> {
        let store = ParamStore::load(&self.out(files::REALIZER_CHECKPOINT))?;
        let (_, metas): (_, Vec<RealizerMeta>) = read_jsonl(&self.out(files::REALIZER_META))?;
        let meta = metas
            .into_iter()
            .next()
            .ok_or_else(|| Error::Checkpoint("realizer metadata is empty".into()))?;
        let (_, vocabs): (_, Vec<VocabRecord>) = read_jsonl(&self.out(files::VOCAB))?;
        let tokens = vocabs
            .into_iter()
            .next()
            .ok_or_else(|| Error::Checkpoint("vocabulary file is empty".into()))?
            .tokens;
        let vocab = Vocabulary::from_tokens(tokens.into_iter().skip(crate::data::SpecialToken::ALL.len()));
        let model = RealizerModel::new(&mut ParamStore::new(0), meta.dims);
        Ok((store, model, vocab))
    }

    fn realize(&self, method: Method, strategy: Option<DecodeStrategy>) -> Result<()> {
        let plan_path = self.out(&files::plans(method.name()));
        let plans = read_plans(&plan_path)?;
        let strategy = strategy.unwrap_or(self.cfg.realizer.strategy);
        let r = &self.cfg.realizer;
        let drafts: Vec<StoryDraft> = match strategy {
            DecodeStrategy::Template => plans.iter().map(|p| template_realize(&p.sequence_id, &p.concepts)).collect(),
            DecodeStrategy::External => {
                let records = self.records(Split::Test)?;
                let jobs = plans
                    .iter()
                    .map(|p| {
                        let rec = records
                            .iter()
                            .find(|r| r.sequence_id == p.sequence_id)
                            .ok_or_else(|| Error::Schema(format!("plan for unknown sequence {}", p.sequence_id)))?;
                        let rows: Vec<Vec<f64>> = rec.images.iter().map(|i| i.feature.clone()).collect();
                        Ok((p.sequence_id.clone(), Tensor::from_rows(&rows)?, p.concepts.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                external_realize_all(&jobs, &r.external)?
            }
            DecodeStrategy::Greedy | DecodeStrategy::Beam | DecodeStrategy::Nucleus => {
                let (store, model, vocab) = self.load_realizer()?;
                let words = self.words()?;
                let records = self.records(Split::Test)?;
                plans
                    .iter()
                    .map(|p| {
                        let rec = records
                            .iter()
                            .find(|r| r.sequence_id == p.sequence_id)
                            .ok_or_else(|| Error::Schema(format!("plan for unknown sequence {}", p.sequence_id)))?;
                        let rows: Vec<Vec<f64>> = rec.images.iter().map(|i| i.feature.clone()).collect();
                        let feats = Tensor::from_rows(&rows)?;
                        let input = model.input(&store, &p.sequence_id, &feats, &p.concepts, &vocab, &words)?;
                        match strategy {
                            DecodeStrategy::Greedy => greedy_decode(&model, &store, &input, r.beam.max_len, &vocab),
                            DecodeStrategy::Beam => beam_decode(&model, &store, &input, &r.beam, &vocab),
                            _ => {
                                let mut opts = r.nucleus;
                                opts.seed ^= crate::graph::sequence_seed(self.cfg.seed, &p.sequence_id);
                                nucleus_decode(&model, &store, &input, &opts, &vocab).map(|(d, _)| d)
                            }
                        }
                    })
                    .collect::<Result<_>>()?
            }
        };
        for (d, p) in drafts.iter().zip(&plans) {
            if d.len() != p.concepts.len() {
                return Err(Error::Realization(format!(
                    "{}: {} sentences for {} images",
                    d.sequence_id,
                    d.len(),
                    p.concepts.len()
                )));
            }
        }
        let path = self.out(&files::stories(method.name()));
        write_stories(&path, &self.header("stories").with("method", method.name()), &drafts)?;
        println!("{}: {} stories -> {}", method.name(), drafts.len(), path.display());
        Ok(())
    }

    fn evaluate(&self, methods: &[Method]) -> Result<()> {
        let mut plan_sets = Vec::new();
        for m in methods {
            let path = self.out(&files::plans(m.name()));
            ensure_exists(&path)?;
            plan_sets.push((*m, read_plans(&path)?));
        }
        let records = self.records(Split::Test)?;
        let graphs = self.graphs(Split::Test)?;
        let targets: Vec<Vec<BTreeSet<String>>> = records
            .iter()
            .zip(&graphs)
            .map(|(rec, g)| {
                let sets = crate::planner::ConceptSets::new(g, &rec.gold_stories);
                (0..sets.gold.len()).map(|i| sets.targets(i)).collect()
            })
            .collect();
        let mut runs = Vec::new();
        for (m, plans) in plan_sets {
            let selections = records
                .iter()
                .map(|rec| {
                    plans
                        .iter()
                        .find(|p| p.sequence_id == rec.sequence_id)
                        .map(plan_concepts)
                        .ok_or_else(|| "no plan for this sequence".to_string())
                })
                .collect();
            let story_path = self.out(&files::stories(m.name()));
            let stories = if story_path.exists() {
                read_stories(&story_path)?
                    .iter()
                    .map(|s| s.story.split_whitespace().map(str::to_string).collect())
                    .collect()
            } else {
                Vec::new()
            };
            runs.push(PlannerRun {
                method: m.name().to_string(),
                selections,
                stories,
            });
        }
        let report = benchmark(&runs, &targets);
        let tsv = report.to_tsv();
        write_text(
            &self.out(files::REPORT_TSV),
            &format!("{}\n{tsv}", self.header("report").comment_line()),
        )?;
        write_jsonl(&self.out(files::REPORT_JSON), &self.header("report"), &report.rows)?;
        print!("{tsv}");
        Ok(())
    }
}

fn synth_data(cfg: &RunConfig, out: &Path, sequences: Option<usize>, seed: Option<u64>) -> Result<()> {
    let synth = SynthConfig {
        sequences: sequences.unwrap_or(SynthConfig::default().sequences),
        seed: seed.unwrap_or(cfg.seed),
        ..SynthConfig::default()
    };
    let bench = generate(&synth)?;
    bench.write(out)?;
    println!(
        "{} train + {} test sequences, {} knowledge edges -> {}",
        bench.train.len(),
        bench.test.len(),
        bench.kb.len(),
        out.display()
    );
    Ok(())
}

fn selftest_command() -> Result<()> {
    let results = selftest::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} self-test checks failed")));
    }
    Ok(())
}
