// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 ok, 1 usage, 2 data, 3 runtime.
#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ss3d/ss3d.hpp"

namespace ss3d::cli {

enum ExitStatus : int { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::CapabilityDenied:
    case ErrorCode::EmptyTrainingSet:
    case ErrorCode::LayoutMismatch:
    case ErrorCode::Timeout:
    case ErrorCode::ProtocolViolation:
    case ErrorCode::ResponderError:
      return kRuntime;
    default:
      return kData;
  }
}

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;

inline bool same_path(const fs::path& a, const fs::path& b) {
  std::error_code ec;
  return fs::weakly_canonical(a, ec) == fs::weakly_canonical(b, ec);
}

inline void require_distinct(const fs::path& in, const fs::path& out) {
  if (same_path(in, out)) throw UsageError("output path must differ from input path " + in.string());
}

/// Writes a dataset into a directory that must not already hold scenes.
inline void write_dataset(const fs::path& dir, const std::vector<Scene>& scenes) {
  if (fs::exists(dir) && !fs::is_empty(dir)) throw UsageError("output directory " + dir.string() + " is not empty");
  save_dataset(dir, scenes);
}

inline RunConfig load_run_config(const std::string& path) {
  const std::string text = read_text_file(path);
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::ConfigInvalid, path + " is not valid JSON");
  return run_config_from_json(j);
}

inline std::map<std::string, std::vector<Detection>> load_detections(const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw Error(ErrorCode::MalformedLabel, path + ": expected an object mapping scene id to detections");
  }
  std::map<std::string, std::vector<Detection>> out;
  for (const auto& [id, arr] : j.items()) {
    try {
      out[id] = detections_from_json(arr);
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedLabel, path + ": scene " + id + ": " + e.what());
    }
  }
  return out;
}

inline std::string csv_from_logs(const std::vector<nlohmann::json>& logs) {
  std::string out = "round,batch,class,difficulty,ap11,ap40\n";
  auto cell = [](const nlohmann::json& v) {
    if (v.is_null()) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v.get<double>());
    return std::string(buf);
  };
  for (const auto& l : logs) {
    const std::string batch = l.contains("batch") && !l["batch"].is_null() ? std::to_string(l["batch"].get<int>()) : "";
    const auto& ap = l.at("eval").at("ap");
    for (ClassId c : kAllClasses) {
      for (Difficulty d : kDifficulties) {
        const auto& e = ap.at(std::string(class_name(c))).at(std::string(difficulty_name(d)));
        out += std::to_string(l.at("round").get<int>()) + "," + batch + "," + std::string(class_name(c)) + "," +
               std::string(difficulty_name(d)) + "," + cell(e.at("ap11")) + "," + cell(e.at("ap40")) + "\n";
      }
    }
  }
  return out;
}

inline nlohmann::json bank_summary(const InstanceBank& bank) {
  nlohmann::json per_class = nlohmann::json::object();
  const auto sizes = bank.size_by_class();
  for (ClassId c : kAllClasses) per_class[std::string(class_name(c))] = sizes[c];
  std::map<int, std::size_t> by_round;
  std::size_t points = 0, human = 0, empty_scenes = 0;
  for (const std::string& id : bank.scene_ids()) {
    const auto& entries = bank.entries(id);
    empty_scenes += entries.empty();
    for (const BankEntry& e : entries) {
      by_round[e.round_added]++;
      points += e.points_local.size();
      human += e.provenance.is_human();
    }
  }
  nlohmann::json rounds = nlohmann::json::object();
  for (auto [r, n] : by_round) rounds[std::to_string(r)] = n;
  const std::size_t total = bank.size();
  return {{"scenes", bank.scene_ids().size()},
          {"scenes_without_entries", empty_scenes},
          {"entries", total},
          {"human", human},
          {"pseudo", bank.pseudo_count()},
          {"per_class", per_class},
          {"by_round_added", rounds},
          {"mean_points", total ? static_cast<double>(points) / static_cast<double>(total) : 0.0}};
}

}  // namespace detail

/// Runs one command line. Diagnostics go to `err`; summaries to `out`.
inline int execute(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sparse-label 3D detection toolkit with an oracle-detector simulation"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  unsigned workers = 1;

  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "Random seed"); };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with latent truth");
  std::string synth_out;
  SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--num-scenes", synth_cfg.num_scenes, "Number of scenes")->capture_default_str();
  synth->add_option("--objects-min", synth_cfg.objects_min, "Minimum objects per scene")->capture_default_str();
  synth->add_option("--objects-max", synth_cfg.objects_max, "Maximum objects per scene")->capture_default_str();
  synth->add_option("--prefix", synth_cfg.id_prefix, "Scene id prefix")->capture_default_str();
  add_seed(synth);
  synth->add_option("--workers", workers, "Worker threads");

  // ingest-kitti
  auto* ingest = app.add_subcommand("ingest-kitti", "Convert a KITTI-layout directory to native scenes");
  std::string ingest_root, ingest_out;
  bool fov = false;
  ingest->add_option("--root", ingest_root, "Directory holding label_2/, calib/, velodyne/")->required();
  ingest->add_option("--out", ingest_out, "Output directory")->required();
  ingest->add_flag("--fov-filter", fov, "Keep only points and boxes inside the camera field of view");
  add_seed(ingest);

  // sparsify
  auto* sparsify_cmd = app.add_subcommand("sparsify", "Keep a few annotations per scene");
  std::string sp_in, sp_out, sp_strategy = "random";
  int keep_n = 1;
  sparsify_cmd->add_option("--in", sp_in, "Input dataset directory")->required();
  sparsify_cmd->add_option("--out", sp_out, "Output dataset directory")->required();
  sparsify_cmd->add_option("--strategy", sp_strategy, "random | easy | hard")
      ->check(CLI::IsMember({"random", "easy", "hard"}))
      ->capture_default_str();
  sparsify_cmd->add_option("--keep-n", keep_n, "Annotations kept per scene")->capture_default_str();
  add_seed(sparsify_cmd);

  // perturb
  auto* perturb = app.add_subcommand("perturb", "Jitter a share of human boxes to a target IoU band");
  std::string pt_in, pt_out;
  double ratio = 0.0, iou_lo = 0.45, iou_hi = 0.55;
  perturb->add_option("--in", pt_in, "Input dataset directory")->required();
  perturb->add_option("--out", pt_out, "Output dataset directory")->required();
  perturb->add_option("--ratio", ratio, "Share of human annotations to perturb")->required();
  perturb->add_option("--iou-lo", iou_lo, "Lower IoU3D bound")->capture_default_str();
  perturb->add_option("--iou-hi", iou_hi, "Upper IoU3D bound")->capture_default_str();
  add_seed(perturb);

  // run / run-streaming
  std::string config_path, logs_path, bank_path;
  bool no_mining = false;
  auto add_run_opts = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
    sub->add_option("--logs", logs_path, "Round logs output (JSON lines)")->required();
    sub->add_option("--bank", bank_path, "Final instance bank output");
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--workers", workers, "Worker threads");
    sub->add_flag("--no-mining", no_mining, "Disable instance mining (baseline)");
  };
  auto* run_cmd = app.add_subcommand("run", "Run the offline training loop");
  add_run_opts(run_cmd);
  auto* stream_cmd = app.add_subcommand("run-streaming", "Run the streaming training loop");
  add_run_opts(stream_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Average precision of detections against a dataset");
  std::string dets_path, gts_path, eval_out, eval_csv;
  int positions = 40;
  eval_cmd->add_option("--dets", dets_path, "Detections JSON: {scene_id: [detection, ...]}")->required();
  eval_cmd->add_option("--gts", gts_path, "Ground-truth dataset directory")->required();
  eval_cmd->add_option("--positions", positions, "Recall positions (11 or 40)")
      ->check(CLI::IsMember({11, 40}))
      ->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Report JSON output (stdout when omitted)");
  eval_cmd->add_option("--csv", eval_csv, "Report CSV output");
  add_seed(eval_cmd);

  // bank inspect
  auto* bank_cmd = app.add_subcommand("bank", "Instance bank tools");
  bank_cmd->require_subcommand(1);
  auto* inspect = bank_cmd->add_subcommand("inspect", "Summarize a bank file");
  std::string inspect_path;
  inspect->add_option("--bank", inspect_path, "Bank file")->required();

  // report
  auto* report = app.add_subcommand("report", "Convert round logs to CSV");
  std::string report_logs, report_csv;
  report->add_option("--logs", report_logs, "Round logs (JSON lines)")->required();
  report->add_option("--csv", report_csv, "CSV output")->required();
  add_seed(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    namespace fs = std::filesystem;
    if (*synth) {
      auto scenes = synthesize_dataset(synth_cfg, seed, workers);
      detail::write_dataset(synth_out, scenes);
      out << "wrote " << scenes.size() << " scenes to " << synth_out << "\n";
    } else if (*ingest) {
      detail::require_distinct(ingest_root, ingest_out);
      auto scenes = load_kitti_directory(ingest_root, fov);
      if (scenes.empty()) throw Error(ErrorCode::DatasetEmpty, "no labels under " + ingest_root);
      detail::write_dataset(ingest_out, scenes);
      out << "wrote " << scenes.size() << " scenes to " << ingest_out << "\n";
    } else if (*sparsify_cmd) {
      detail::require_distinct(sp_in, sp_out);
      auto scenes = load_dataset(sp_in);
      if (scenes.empty()) throw Error(ErrorCode::DatasetEmpty, "no scenes under " + sp_in);
      Rng rng(seed);
      auto sparse = sparsify(std::move(scenes), *parse_strategy(sp_strategy), keep_n, rng);
      detail::write_dataset(sp_out, sparse);
      out << "wrote " << sparse.size() << " scenes to " << sp_out << "\n";
    } else if (*perturb) {
      detail::require_distinct(pt_in, pt_out);
      auto scenes = load_dataset(pt_in);
      if (scenes.empty()) throw Error(ErrorCode::DatasetEmpty, "no scenes under " + pt_in);
      Rng rng(seed);
      auto noisy = perturb_annotations(std::move(scenes), ratio, iou_lo, iou_hi, rng);
      detail::write_dataset(pt_out, noisy);
      out << "wrote " << noisy.size() << " scenes to " << pt_out << "\n";
    } else if (*run_cmd || *stream_cmd) {
      detail::require_distinct(config_path, logs_path);
      RunConfig cfg = detail::load_run_config(config_path);
      const auto* sub = *run_cmd ? run_cmd : stream_cmd;
      if (sub->count("--seed")) cfg.seed = seed;
      if (sub->count("--workers")) cfg.workers = workers;
      if (no_mining) cfg.mining = false;
      if (*stream_cmd && !cfg.streaming) throw Error(ErrorCode::ConfigInvalid, "config has no streaming section");
      cfg.validate();
      const RunResult res = *run_cmd ? run(cfg) : run_streaming(cfg);
      write_text_file(logs_path, round_logs_to_jsonl(res.logs));
      if (!bank_path.empty()) write_file(bank_path, save_bank(res.bank));
      if (!res.logs.empty()) {
        const auto& last = res.logs.back().report;
        out << "rounds " << res.logs.size() << ", bank entries " << res.bank.size();
        if (last.map_moderate) out << ", moderate mAP " << *last.map_moderate;
        out << "\n";
      }
    } else if (*eval_cmd) {
      const auto dets = detail::load_detections(dets_path);
      const auto scenes = load_dataset(gts_path);
      if (scenes.empty()) throw Error(ErrorCode::DatasetEmpty, "no scenes under " + gts_path);
      std::vector<std::vector<Detection>> per_scene;
      std::vector<std::vector<Annotation>> truth;
      for (const Scene& s : scenes) {
        auto it = dets.find(s.id);
        per_scene.push_back(it == dets.end() ? std::vector<Detection>{} : it->second);
        std::vector<Annotation> gt;
        if (s.has_latent()) {
          for (const LatentObject& o : s.latent_gt(LatentAccess::evaluator())) gt.push_back(o.annotation);
        } else {
          gt = s.annotations;
        }
        truth.push_back(std::move(gt));
      }
      for (const auto& [id, v] : dets) {
        if (std::none_of(scenes.begin(), scenes.end(), [&](const Scene& s) { return s.id == id; })) {
          throw Error(ErrorCode::UnknownScene, "detections for unknown scene " + id);
        }
      }
      EvalReport rep;
      rep.ap = evaluate_detections(per_scene, truth);
      rep.map_moderate = moderate_map(rep.ap, positions);
      nlohmann::json j = eval_report_to_json(rep);
      j["positions"] = positions;
      if (eval_out.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_text_file(eval_out, j.dump(2) + "\n");
      }
      if (!eval_csv.empty()) write_text_file(eval_csv, csv_header() + eval_report_csv_rows(rep));
    } else if (*bank_cmd) {
      const InstanceBank bank = load_bank(read_file(inspect_path));
      out << detail::bank_summary(bank).dump(2) << "\n";
    } else if (*report) {
      detail::require_distinct(report_logs, report_csv);
      std::vector<nlohmann::json> logs;
      const std::string text = read_text_file(report_logs);
      for (std::string_view line : ss3d::detail::split_lines(text)) {
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::MalformedLabel, "bad log line in " + report_logs);
        logs.push_back(std::move(j));
      }
      try {
        write_text_file(report_csv, detail::csv_from_logs(logs));
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::MalformedLabel, std::string("log missing fields: ") + e.what());
      }
      out << "wrote " << logs.size() << " rounds to " << report_csv << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace ss3d::cli
