#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cst/checkpoint.hpp"
#include "cst/dataset.hpp"
#include "cst/eval.hpp"
#include "cst/metrics.hpp"
#include "cst/trainer.hpp"
#include "cst/version.hpp"
#include "cst/vocab.hpp"

namespace cst {
namespace cli {

struct Logger {
  bool json = false;
  int verbosity = 0;

  void event(const std::string& name, const nlohmann::json& fields) const {
    if (json) {
      nlohmann::json line = fields;
      line["event"] = name;
      std::cerr << line.dump() << "\n";
    } else if (verbosity >= 0) {
      std::cerr << name;
      if (!fields.empty()) std::cerr << " " << fields.dump();
      std::cerr << "\n";
    }
  }
};

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << j.dump(2) << "\n";
}

// key=value overrides on top of a config object. Values parse as JSON when
// they can, and fall back to plain strings (--set mode=RL, --set epochs=5).
inline void apply_overrides(nlohmann::json& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto pos = kv.find('=');
    if (pos == std::string::npos || pos == 0)
      throw std::runtime_error("override must look like key=value: " + kv);
    const std::string key = kv.substr(0, pos);
    const std::string raw = kv.substr(pos + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    cfg[key] = value;
  }
}

// JSONL of {"id": ..., "caption": ...} records, encoded against the vocab.
inline std::map<std::string, TokenSequence> load_candidates(const std::string& path,
                                                            const Vocabulary& vocab, int max_len) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open candidates file: " + path);
  std::map<std::string, TokenSequence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      const auto id = j.at("id").get<std::string>();
      if (out.count(id)) throw std::runtime_error("duplicate candidate id " + id);
      out[id] = encode_caption(j.at("caption").get<std::string>(), vocab, max_len);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("malformed candidate at line " + std::to_string(lineno) + ": " +
                               e.what());
    }
  }
  if (out.empty()) throw std::runtime_error("no candidates in " + path);
  return out;
}

inline TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& sets,
                                  bool seed_given, uint64_t seed) {
  nlohmann::json j = load_json_file(path);
  if (!j.is_object()) throw std::runtime_error("config must be a JSON object: " + path);
  apply_overrides(j, sets);
  TrainConfig cfg = train_config_from_json(j);
  if (seed_given) cfg.seed = seed;
  validate(cfg);
  return cfg;
}

inline const RewardTable* prepare_rewards(const TrainConfig& cfg, const Dataset& ds,
                                          const std::string& rewards_path,
                                          const std::string& out_dir, RewardTable& storage,
                                          const Logger& log) {
  const bool needs =
      cfg.mode == "WXE" || (cfg.mode == "RL" && cfg.baseline == "scb_gt");
  if (!rewards_path.empty()) {
    storage = load_reward_table(rewards_path);
    return &storage;
  }
  if (!needs) return nullptr;
  storage = precompute_rewards(training_split(ds), parse_metric(cfg.reward_metric),
                               cfg.reward_mode);
  const auto path = (std::filesystem::path(out_dir) / "rewards.json").string();
  save_reward_table(path, storage);
  log.event("rewards_written", {{"path", path}, {"items", storage.items.size()}});
  return &storage;
}

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"consensus-reward captioning trainer"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Logger log;
  int threads = 1;
  app.add_flag("--json-logs", log.json, "emit machine-readable log lines on stderr");
  app.add_flag("-v,--verbose", log.verbosity, "increase verbosity");
  app.add_option("--threads", threads, "cap worker parallelism")->check(CLI::PositiveNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic consensus dataset");
  struct {
    uint64_t seed = 0;
    int items = 100;
    int vocab_size = 50;
    int captions = 5;
    double noise = 0.3;
    std::string out, vocab_out;
  } sy;
  synth->add_option("--seed", sy.seed, "generator seed");
  synth->add_option("--items", sy.items, "number of items")->check(CLI::PositiveNumber);
  synth->add_option("--vocab-size", sy.vocab_size, "word inventory size")
      ->check(CLI::PositiveNumber);
  synth->add_option("--captions", sy.captions, "captions per item")->check(CLI::PositiveNumber);
  synth->add_option("--noise", sy.noise, "per-token corruption probability in [0,1]");
  synth->add_option("--out", sy.out, "output dataset (JSONL)")->required();
  synth->add_option("--vocab-out", sy.vocab_out, "output vocab JSON (default <out>.vocab.json)");
  synth->callback([&] {
    const Dataset ds = generate_synthetic(sy.seed, sy.items, sy.vocab_size, sy.captions, sy.noise);
    save_dataset(ds, sy.out);
    const std::string vpath = sy.vocab_out.empty() ? sy.out + ".vocab.json" : sy.vocab_out;
    const Vocabulary vocab = synthetic_vocab(ds);
    save_vocab(vocab, 0, vpath);
    log.event("synth_done", {{"dataset", sy.out},
                             {"vocab", vpath},
                             {"items", ds.items.size()},
                             {"vocab_size", vocab.size()}});
  });

  // score
  auto* score = app.add_subcommand("score", "score candidate captions against a dataset");
  struct {
    std::string dataset, vocab, candidates, metric = "cider", out;
    int max_len = 20;
  } sc;
  score->add_option("--dataset", sc.dataset, "reference dataset (JSONL)")->required();
  score->add_option("--vocab", sc.vocab, "vocab JSON")->required();
  score->add_option("--candidates", sc.candidates, "candidate JSONL with id/caption")->required();
  score->add_option("--metric", sc.metric, "cider | bleu4 | rougeL");
  score->add_option("--max-len", sc.max_len, "encoding length cap")->check(CLI::PositiveNumber);
  score->add_option("--out", sc.out, "report path (stdout when omitted)");
  score->callback([&] {
    const Vocabulary vocab = load_vocab(sc.vocab);
    const Dataset ds = load_dataset(sc.dataset, vocab, 3, sc.max_len).first;
    const auto cands = load_candidates(sc.candidates, vocab, sc.max_len);
    const CorpusScore cs = corpus_score(cands, ds, parse_metric(sc.metric));
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [id, s] : cs.per_item) per[id] = s;
    const nlohmann::json report = {
        {"metric", sc.metric}, {"corpus", cs.corpus}, {"per_item", per}};
    if (sc.out.empty()) {
      std::cout << report.dump(2) << "\n";
    } else {
      write_json_file(sc.out, report);
    }
    log.event("score_done", {{"metric", sc.metric}, {"corpus", cs.corpus}});
  });

  // precompute
  auto* pre = app.add_subcommand("precompute", "store per-caption rewards and consensus baselines");
  struct {
    std::string dataset, vocab, metric = "cider", mode = "leave_one_out", out;
    int max_len = 20;
  } pc;
  pre->add_option("--dataset", pc.dataset, "dataset (JSONL)")->required();
  pre->add_option("--vocab", pc.vocab, "vocab JSON")->required();
  pre->add_option("--metric", pc.metric, "cider | bleu4 | rougeL");
  pre->add_option("--mode", pc.mode, "leave_one_out | include_self");
  pre->add_option("--max-len", pc.max_len, "encoding length cap")->check(CLI::PositiveNumber);
  pre->add_option("--out", pc.out, "reward table path")->required();
  pre->callback([&] {
    const Vocabulary vocab = load_vocab(pc.vocab);
    const Dataset ds = load_dataset(pc.dataset, vocab, 3, pc.max_len).first;
    const RewardTable table = precompute_rewards(ds, parse_metric(pc.metric), pc.mode);
    save_reward_table(pc.out, table);
    log.event("precompute_done", {{"out", pc.out}, {"items", table.items.size()}});
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "run one training configuration");
  struct {
    std::string config, dataset, vocab, rewards, out;
    std::vector<std::string> sets;
    uint64_t seed = 0;
    bool seed_given = false;
  } tr;
  train_cmd->add_option("--config", tr.config, "training config JSON")->required();
  train_cmd->add_option("--dataset", tr.dataset, "dataset (JSONL)")->required();
  train_cmd->add_option("--vocab", tr.vocab, "vocab JSON")->required();
  train_cmd->add_option("--rewards", tr.rewards, "precomputed reward table");
  train_cmd->add_option("--out", tr.out, "output directory")->required();
  train_cmd->add_option("--set", tr.sets, "config override key=value (repeatable)");
  train_cmd->add_option("--seed", tr.seed, "override config seed")
      ->each([&](const std::string&) { tr.seed_given = true; });
  train_cmd->callback([&] {
    const TrainConfig cfg = resolve_config(tr.config, tr.sets, tr.seed_given, tr.seed);
    std::filesystem::create_directories(tr.out);
    const Vocabulary vocab = load_vocab(tr.vocab);
    const Dataset ds = load_dataset(tr.dataset, vocab, 3, cfg.max_len).first;
    write_json_file((std::filesystem::path(tr.out) / "resolved_config.json").string(),
                    train_config_json(cfg));
    log.event("config", train_config_json(cfg));

    RewardTable storage;
    const RewardTable* table = prepare_rewards(cfg, ds, tr.rewards, tr.out, storage, log);
    const TrainResult result = train(cfg, ds, vocab.size(), table);

    save_checkpoint((std::filesystem::path(tr.out) / "checkpoint_final.json").string(),
                    result.params);
    save_checkpoint((std::filesystem::path(tr.out) / "checkpoint_best.json").string(),
                    result.best_params);
    save_train_log((std::filesystem::path(tr.out) / "train_log.jsonl").string(), result.log);
    log.event("train_done",
              {{"epochs", result.log.epochs.size()}, {"best_epoch", result.best_epoch}});
  });

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "pre-train, then fine-tune with policy gradients");
  struct {
    std::string pretrain, finetune, dataset, vocab, out;
    uint64_t seed = 0;
    bool seed_given = false;
  } pl;
  pipe->add_option("--pretrain", pl.pretrain, "pre-training config JSON")->required();
  pipe->add_option("--finetune", pl.finetune, "fine-tuning config JSON")->required();
  pipe->add_option("--dataset", pl.dataset, "dataset (JSONL)")->required();
  pipe->add_option("--vocab", pl.vocab, "vocab JSON")->required();
  pipe->add_option("--out", pl.out, "output directory")->required();
  pipe->add_option("--seed", pl.seed, "override both config seeds")
      ->each([&](const std::string&) { pl.seed_given = true; });
  pipe->callback([&] {
    const TrainConfig pre_cfg = resolve_config(pl.pretrain, {}, pl.seed_given, pl.seed);
    const TrainConfig fine_cfg = resolve_config(pl.finetune, {}, pl.seed_given, pl.seed);
    std::filesystem::create_directories(pl.out);
    const Vocabulary vocab = load_vocab(pl.vocab);
    const Dataset ds = load_dataset(pl.dataset, vocab, 3, pre_cfg.max_len).first;
    write_json_file((std::filesystem::path(pl.out) / "resolved_pretrain_config.json").string(),
                    train_config_json(pre_cfg));
    write_json_file((std::filesystem::path(pl.out) / "resolved_finetune_config.json").string(),
                    train_config_json(fine_cfg));
    log.event("config", {{"pretrain", train_config_json(pre_cfg)},
                         {"finetune", train_config_json(fine_cfg)}});

    const PipelineResult result = cst_pipeline(pre_cfg, fine_cfg, ds, vocab.size());
    save_checkpoint((std::filesystem::path(pl.out) / "pretrain_checkpoint.json").string(),
                    result.pretrain_params);
    save_checkpoint((std::filesystem::path(pl.out) / "checkpoint_final.json").string(),
                    result.finetune.params);
    save_checkpoint((std::filesystem::path(pl.out) / "checkpoint_best.json").string(),
                    result.finetune.best_params);
    save_train_log((std::filesystem::path(pl.out) / "train_log.jsonl").string(), result.log);
    log.event("pipeline_done", {{"epochs", result.log.epochs.size()},
                                {"best_epoch", result.finetune.best_epoch}});
  });

  // eval
  auto* ev = app.add_subcommand("eval", "beam-decode a checkpoint and report metrics");
  struct {
    std::string checkpoint, dataset, vocab, out, df = "self", train_dataset;
    int beam = 5;
    int max_len = 20;
  } ex;
  ev->add_option("--checkpoint", ex.checkpoint, "model checkpoint JSON")->required();
  ev->add_option("--dataset", ex.dataset, "dataset to decode (JSONL)")->required();
  ev->add_option("--vocab", ex.vocab, "vocab JSON")->required();
  ev->add_option("--beam", ex.beam, "beam width")->check(CLI::PositiveNumber);
  ev->add_option("--max-len", ex.max_len, "decode length cap")->check(CLI::PositiveNumber);
  ev->add_option("--df", ex.df, "consensus statistics source: self | train");
  ev->add_option("--train-dataset", ex.train_dataset, "reference corpus when --df train");
  ev->add_option("--out", ex.out, "report path (stdout when omitted)");
  ev->callback([&] {
    const Vocabulary vocab = load_vocab(ex.vocab);
    const Dataset ds = load_dataset(ex.dataset, vocab, 3, ex.max_len).first;
    const ModelParams params = load_checkpoint(ex.checkpoint);
    EvalReport report;
    if (ex.df == "train") {
      if (ex.train_dataset.empty())
        throw std::runtime_error("--df train requires --train-dataset");
      const Dataset tds = load_dataset(ex.train_dataset, vocab, 3, ex.max_len).first;
      const DocFreq df = build_doc_freq(reference_sets(tds));
      report = evaluate(params, ds, vocab, ex.beam, ex.max_len, &df);
    } else if (ex.df == "self") {
      report = evaluate(params, ds, vocab, ex.beam, ex.max_len);
    } else {
      throw std::runtime_error("--df must be self or train");
    }
    if (ex.out.empty()) {
      std::cout << report_json(report).dump(2) << "\n";
    } else {
      save_report(ex.out, report);
    }
    log.event("eval_done", {{"CIDEr", report.cider}, {"BLEU_4", report.bleu[3]}});
  });

  std::vector<std::string> argv_storage;
  argv_storage.reserve(args.size() + 1);
  argv_storage.push_back("cst");
  for (const auto& a : args) argv_storage.push_back(a);
  std::vector<char*> argv;
  argv.reserve(argv_storage.size());
  for (auto& s : argv_storage) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace cli
}  // namespace cst
