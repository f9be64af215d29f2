// Command-line front end for the spatio-temporal instruction-tuning
// pipeline: data synthesis and ingestion, instruction-corpus export,
// training, protocol evaluation, ablations, and single-prompt prediction.
//
// Exit codes: 0 success, 1 usage error, 2 data/config error,
// 3 numeric failure (non-finite loss).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "stit/ingest.hpp"
#include "stit/runner.hpp"

namespace fs = std::filesystem;
using namespace stit;

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path + "': " + e.what());
    }
    return j;
}

void file_manifest(const std::string& out_path, const nlohmann::json& config_json, uint64_t seed,
                   const nlohmann::json& extra = {}) {
    nlohmann::json m = {{"config_hash", config_fingerprint(config_json, seed)},
                        {"seed", seed},
                        {"version", kVersion}};
    if (!extra.is_null() && !extra.empty()) m["run"] = extra;
    std::ofstream out(out_path + ".manifest.json");
    if (!out) throw DataError("cannot write manifest beside '" + out_path + "'");
    out << m.dump(2) << "\n";
}

const DatasetConfig& pick_dataset(const RunConfig& cfg, const std::string& name) {
    if (name.empty()) {
        if (cfg.data.datasets.empty()) throw ConfigError("config has no datasets");
        return cfg.data.datasets.front();
    }
    for (const auto& d : cfg.data.datasets)
        if (d.name == name) return d;
    if (cfg.data.cross_city && cfg.data.cross_city->name == name) return *cfg.data.cross_city;
    throw ConfigError("config has no dataset named '" + name + "'");
}

struct TrainArtifacts {
    std::vector<LossBreakdown> history;
};

TrainArtifacts run_training(Experiment& exp, const RunConfig& cfg, const nlohmann::json& configs,
                            const std::string& out_dir) {
    Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
    TrainArtifacts art;
    for (int e = 0; e < cfg.train.epochs; ++e) {
        auto loss = trainer.train_epoch(e);
        art.history.push_back(loss);
        std::cerr << "epoch " << (e + 1) << "/" << cfg.train.epochs << "  total " << loss.total
                  << "  (llm " << loss.l_llm << ", r " << loss.l_r << ", c " << loss.l_c << ")\n";
        if (cfg.train.checkpoint_every > 0 && (e + 1) % cfg.train.checkpoint_every == 0)
            trainer.save(out_dir + "/epoch" + std::to_string(e + 1) + ".stit", configs);
    }
    trainer.save(out_dir + "/final.stit", configs);
    return art;
}

void write_losses(const std::string& dir, const std::vector<LossBreakdown>& history) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& l : history)
        j.push_back({{"total", l.total}, {"l_llm", l.l_llm}, {"l_r", l.l_r}, {"l_c", l.l_c}});
    std::ofstream out(fs::path(dir) / "losses.json");
    out << j.dump(2) << "\n";
}

void write_reports(const std::string& dir, const MetricReport& report,
                   const std::string& stem = "report") {
    std::ofstream rj(fs::path(dir) / (stem + ".json"));
    rj << report_to_json(report).dump(2) << "\n";
    write_report_csv(report, (fs::path(dir) / (stem + ".csv")).string(),
                     (fs::path(dir) / (stem + "_steps.csv")).string());
}

void print_report_summary(const MetricReport& report) {
    for (const auto& e : report.entries) {
        if (e.source != "model") continue;
        if (e.classification)
            std::cout << report.protocol << "  " << e.dataset << "/" << e.feature << "  recall "
                      << e.recall << "  macro-f1 " << e.macro_f1 << "\n";
        else
            std::cout << report.protocol << "  " << e.dataset << "/" << e.feature << "  mae "
                      << e.mae << "  rmse " << e.rmse << "\n";
    }
    if (report.missing_pre_fallbacks)
        std::cout << "  (copy-last fallbacks for missing forecasting tokens: "
                  << report.missing_pre_fallbacks << ")\n";
    if (report.t2p_unparseable)
        std::cout << "  (unparseable generated answers: " << report.t2p_unparseable << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spatio-temporal instruction tuning over a tiny language model"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker thread cap for data prep and evaluation")
        ->capture_default_str();

    // ---------------------------------------------------------------- synth
    auto* synth = app.add_subcommand("synth", "generate a seeded synthetic dataset tensor");
    std::string synth_config, synth_out, synth_dataset, synth_split_out;
    synth->add_option("--config", synth_config, "run config JSON")->required();
    synth->add_option("--out", synth_out, "output .stt tensor path")->required();
    synth->add_option("--dataset", synth_dataset, "dataset name from the config (default: first)");
    synth->add_option("--split-out", synth_split_out, "also write the seeded region split JSON");

    // --------------------------------------------------------------- ingest
    auto* ingest = app.add_subcommand("ingest", "aggregate trip records onto a lat/lon grid");
    std::string ingest_trips_path, ingest_grid, ingest_out, ingest_city = "", ingest_subject = "taxi";
    std::string ingest_pois, ingest_start;
    int ingest_steps = 0;
    ingest->add_option("--trips", ingest_trips_path, "trip CSV (timestamp,pickup/dropoff lat/lon)")
        ->required();
    ingest->add_option("--grid", ingest_grid, "grid config JSON (bbox, cell_km, interval)")
        ->required();
    ingest->add_option("--out", ingest_out, "output .stt tensor path")->required();
    ingest->add_option("--city", ingest_city, "city name for region metadata");
    ingest->add_option("--subject", ingest_subject, "flow noun used in prompts")
        ->capture_default_str();
    ingest->add_option("--pois", ingest_pois, "region description sidecar JSON");
    ingest->add_option("--start", ingest_start,
                       "ISO-8601 start of the time axis (default: derived from the records)");
    ingest->add_option("--steps", ingest_steps,
                       "number of time steps (default: derived from the records)");

    // --------------------------------------------- build-instructions
    auto* build = app.add_subcommand("build-instructions",
                                     "render an instruction corpus from a tensor and a split");
    std::string bi_tensor, bi_split, bi_out, bi_tokenizer, bi_mode = "token-regression";
    std::string bi_task = "regression", bi_which = "train";
    int bi_h = 12, bi_p = 12, bi_stride = 12;
    bool bi_no_context = false;
    build->add_option("--tensor", bi_tensor, ".stt tensor file")->required();
    build->add_option("--split", bi_split, "region split JSON")->required();
    build->add_option("--out", bi_out, "output corpus (.stjsonl)")->required();
    build->add_option("--tokenizer", bi_tokenizer,
                      "tokenizer JSON to reuse; default builds one and writes "
                      "<out>.tokenizer.json");
    build->add_option("--mode", bi_mode, "target mode: token-regression | text-numbers")
        ->capture_default_str();
    build->add_option("--task", bi_task, "task kind: regression | classification")
        ->capture_default_str();
    build->add_option("--which", bi_which, "regions/time range: train | zero-shot")
        ->capture_default_str();
    build->add_option("--history", bi_h, "history length")->capture_default_str();
    build->add_option("--horizon", bi_p, "prediction length")->capture_default_str();
    build->add_option("--stride", bi_stride, "window stride")->capture_default_str();
    build->add_flag("--no-context", bi_no_context, "omit time and region sentences");

    // ---------------------------------------------------------------- train
    auto* train = app.add_subcommand("train", "instruction-tune the model on a run config");
    std::string train_config, train_out;
    train->add_option("--config", train_config, "run config JSON")->required();
    train->add_option("--out", train_out, "checkpoint output directory")->required();

    // ----------------------------------------------------------------- eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under a protocol");
    std::string eval_ckpt, eval_protocol, eval_out, eval_config;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--protocol", eval_protocol, "zero-shot | cross-city | supervised")
        ->required();
    eval->add_option("--out", eval_out, "report output directory")->required();
    eval->add_option("--config", eval_config, "override the config stored in the checkpoint");

    // --------------------------------------------------------------- ablate
    auto* ablate = app.add_subcommand("ablate", "train and compare an ablation variant");
    std::string ab_variant, ab_config, ab_out = "ablation-out";
    ablate->add_option("--variant", ab_variant, "STC_OFF | MULTI_OFF | STE_OFF | T2P")->required();
    ablate->add_option("--config", ab_config, "run config JSON")->required();
    ablate->add_option("--out", ab_out, "output directory")->capture_default_str();

    // -------------------------------------------------------------- predict
    auto* predict = app.add_subcommand("predict", "answer a single structured prompt");
    std::string pr_ckpt, pr_json;
    int pr_max_new = 64;
    predict->add_option("--ckpt", pr_ckpt, "checkpoint file")->required();
    predict->add_option("--prompt-json", pr_json,
                        "structured prompt inputs (history, region, time, subject)")
        ->required();
    predict->add_option("--max-new", pr_max_new, "generation budget")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
            return app.exit(e);
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        if (*synth) {
            auto cfg = load_run_config(synth_config);
            const auto& d = pick_dataset(cfg, synth_dataset);
            if (!d.synth) throw ConfigError("dataset '" + d.name + "' has no synth block");
            auto t = synth_generate(*d.synth);
            t.name = d.name;
            save_stt(t, synth_out);
            file_manifest(synth_out, read_json_file(synth_config), cfg.seed,
                          {{"command", "synth"}, {"dataset", d.name}});
            if (!synth_split_out.empty()) {
                cfg.require_seed();
                auto split = split_regions(
                    t, cfg.seed ^ fnv1a64(d.name), cfg.data.n_train_regions,
                    cfg.data.n_zero_shot_regions,
                    {0, cfg.data.train_days * (24 * 60 / t.time.interval_minutes)},
                    {cfg.data.train_days * (24 * 60 / t.time.interval_minutes), t.T()});
                std::ofstream out(synth_split_out);
                out << split_to_json(split).dump(2) << "\n";
            }
            std::cout << "wrote " << synth_out << " (" << t.R() << " regions, " << t.T()
                      << " steps, " << t.F() << " features)\n";
        } else if (*ingest) {
            auto grid_json = read_json_file(ingest_grid);
            auto grid_cfg = GridConfig::from_json(grid_json);
            std::ifstream csv(ingest_trips_path);
            if (!csv) throw DataError("cannot open '" + ingest_trips_path + "'");
            auto records = parse_trip_csv(csv);
            TimeMeta time;
            time.interval_minutes = grid_cfg.interval_minutes;
            if (!ingest_start.empty()) {
                time.start_epoch_s = parse_iso8601(ingest_start);
            } else {
                if (records.empty()) throw DataError("no records and no --start given");
                int64_t lo = records.front().timestamp;
                for (const auto& r : records) lo = std::min(lo, r.timestamp);
                const int64_t iv = int64_t(grid_cfg.interval_minutes) * 60;
                time.start_epoch_s = (lo / iv) * iv;
            }
            if (ingest_steps > 0) {
                time.steps = ingest_steps;
            } else {
                int64_t hi = time.start_epoch_s;
                for (const auto& r : records) hi = std::max(hi, r.timestamp);
                const int64_t iv = int64_t(grid_cfg.interval_minutes) * 60;
                time.steps = int((hi - time.start_epoch_s) / iv) + 1;
            }
            IngestStats stats;
            auto t = stit::ingest_trips(records, grid_cfg, time, &stats, ingest_city, ingest_subject);
            if (!ingest_pois.empty()) apply_poi_sidecar(t, read_json_file(ingest_pois));
            save_stt(t, ingest_out);
            file_manifest(ingest_out, grid_json, 0,
                          {{"command", "ingest"},
                           {"rows", stats.rows},
                           {"skipped_out_of_bbox", stats.skipped_out_of_bbox},
                           {"skipped_out_of_time", stats.skipped_out_of_time}});
            std::cout << "wrote " << ingest_out << " (" << t.R() << " regions, " << t.T()
                      << " steps); rows " << stats.rows << ", out-of-bbox "
                      << stats.skipped_out_of_bbox << ", out-of-time "
                      << stats.skipped_out_of_time << "\n";
        } else if (*build) {
            auto t = load_stt(bi_tensor);
            auto split = split_from_json(read_json_file(bi_split));
            PromptOptions opts;
            opts.include_context = !bi_no_context;
            if (bi_mode == "text-numbers")
                opts.target_mode = TargetMode::text_numbers;
            else if (bi_mode != "token-regression")
                throw ConfigError("unknown --mode '" + bi_mode + "'");
            TaskKind task = bi_task == "classification" ? TaskKind::classification
                                                        : TaskKind::regression;
            const auto& regions =
                bi_which == "zero-shot" ? split.zero_shot_region_ids : split.train_region_ids;
            const auto& range = bi_which == "zero-shot" ? split.test_time : split.train_time;
            auto entries = build_corpus(t, regions, range, bi_h, bi_p, bi_stride, task, nullptr,
                                        opts);
            Tokenizer tok;
            if (!bi_tokenizer.empty() && fs::exists(bi_tokenizer)) {
                tok = Tokenizer::load(bi_tokenizer);
            } else {
                for (auto s : {kStStart, kStHis, kStEnd, kStPre}) tok.add_special(s);
                std::vector<std::string> texts;
                for (const auto& e : entries) {
                    texts.push_back(e.rec.prompt_text);
                    texts.push_back(e.rec.target_text);
                }
                tok.build(texts);
                const std::string tok_out =
                    bi_tokenizer.empty() ? bi_out + ".tokenizer.json" : bi_tokenizer;
                tok.save(tok_out);
            }
            std::vector<InstructionRecord> records;
            for (auto& e : entries) {
                finalize_positions(e.rec, tok);
                records.push_back(e.rec);
            }
            save_stjsonl(records, bi_out);
            file_manifest(bi_out, {{"tensor", bi_tensor}, {"split", bi_split}}, 0,
                          {{"command", "build-instructions"}, {"records", records.size()}});
            std::cout << "wrote " << records.size() << " instruction records to " << bi_out
                      << "\n";
        } else if (*train) {
            auto cfg = load_run_config(train_config);
            cfg.require_seed();
            cfg.threads = std::max(cfg.threads, threads);
            fs::create_directories(train_out);
            auto cfg_json = read_json_file(train_config);
            auto data = prepare_data(cfg, fs::path(train_config).parent_path().string());
            auto exp = build_experiment(cfg, data);
            nlohmann::json configs = {{"run_config", cfg_json}, {"variant", "FULL"}};
            auto art = run_training(exp, cfg, configs, train_out);
            write_losses(train_out, art.history);
            write_run_manifest(train_out, cfg_json, cfg.seed,
                               {{"command", "train"}, {"epochs", cfg.train.epochs}});
            std::cout << "final epoch loss: " << art.history.back().total << " (llm "
                      << art.history.back().l_llm << ", r " << art.history.back().l_r << ", c "
                      << art.history.back().l_c << ")\ncheckpoint: " << train_out
                      << "/final.stit\n";
        } else if (*eval) {
            Protocol protocol;
            if (eval_protocol == "zero-shot") protocol = Protocol::zero_shot;
            else if (eval_protocol == "cross-city") protocol = Protocol::cross_city;
            else if (eval_protocol == "supervised") protocol = Protocol::supervised;
            else throw ConfigError("unknown protocol '" + eval_protocol + "'");
            auto restored = restore_experiment(eval_ckpt, fs::path(eval_ckpt).parent_path(),
                                               eval_config);
            restored.exp.cfg.threads = std::max(restored.exp.cfg.threads, threads);
            fs::create_directories(eval_out);
            const auto fp = config_fingerprint(restored.extras.configs, restored.exp.cfg.seed);
            auto report = evaluate_experiment(restored.exp, protocol, fp);
            write_reports(eval_out, report);
            write_run_manifest(eval_out, restored.extras.configs, restored.exp.cfg.seed,
                               {{"command", "eval"}, {"protocol", eval_protocol}});
            print_report_summary(report);
        } else if (*ablate) {
            auto variant = parse_variant(ab_variant);
            if (variant == AblationVariant::FULL)
                throw ConfigError("--variant must name an ablation, not FULL");
            auto cfg = load_run_config(ab_config);
            cfg.require_seed();
            cfg.threads = std::max(cfg.threads, threads);
            fs::create_directories(ab_out);
            auto cfg_json = read_json_file(ab_config);
            auto data = prepare_data(cfg, fs::path(ab_config).parent_path().string());

            auto full = build_experiment(cfg, data, AblationVariant::FULL);
            run_training(full, cfg, {{"run_config", cfg_json}, {"variant", "FULL"}}, ab_out);
            auto full_report = evaluate_experiment(full, Protocol::zero_shot, "FULL");

            auto var = build_experiment(cfg, data, variant);
            run_training(var, cfg, {{"run_config", cfg_json}, {"variant", ab_variant}}, ab_out);
            auto var_report = evaluate_experiment(var, Protocol::zero_shot, ab_variant);

            write_reports(ab_out, full_report, "full_report");
            write_reports(ab_out, var_report, ab_variant + "_report");
            auto table = ablation_table(full_report, var_report, ab_variant);
            std::ofstream cmp(fs::path(ab_out) / "comparison.json");
            cmp << table.dump(2) << "\n";
            write_run_manifest(ab_out, cfg_json, cfg.seed,
                               {{"command", "ablate"}, {"variant", ab_variant}});
            std::cout << "zero-shot comparison (FULL vs " << ab_variant << "):\n";
            for (const auto& row : table) {
                std::cout << "  " << row.at("dataset").get<std::string>() << "/"
                          << row.at("feature").get<std::string>();
                if (row.contains("full_mae"))
                    std::cout << "  mae " << row.at("full_mae").get<double>() << " -> "
                              << row.at("variant_mae").get<double>() << "\n";
                else
                    std::cout << "  macro-f1 " << row.at("full_macro_f1").get<double>() << " -> "
                              << row.at("variant_macro_f1").get<double>() << "\n";
            }
        } else if (*predict) {
            auto restored = restore_experiment(pr_ckpt, fs::path(pr_ckpt).parent_path());
            auto pj = read_json_file(pr_json);
            WindowSample w;
            w.F = int(pj.at("feature_names").size());
            auto hist = pj.at("history");
            w.H = int(hist.size());
            w.P = pj.value("p", restored.exp.cfg.data.p);
            for (const auto& row : hist)
                for (const auto& v : row) w.history.push_back(v.get<float>());
            if (int(w.history.size()) != w.H * w.F)
                throw DataError("prompt json: history rows must each hold one value per feature");
            w.target.assign(size_t(w.P) * w.F, 0.f);
            RegionMeta region;
            if (pj.contains("region")) {
                const auto& rj = pj.at("region");
                region.city = rj.value("city", "");
                region.borough = rj.value("borough", "");
                if (rj.contains("poi_categories"))
                    region.poi_categories = rj.at("poi_categories").get<std::vector<std::string>>();
            }
            TimeMeta time;
            time.start_epoch_s = parse_iso8601(pj.at("time").at("start").get<std::string>());
            time.interval_minutes = pj.at("time").at("interval_minutes").get<int>();
            time.steps = w.H + w.P;
            auto features = pj.at("feature_names").get<std::vector<std::string>>();
            auto subject = pj.at("subject").get<std::string>();

            CorpusEntry entry;
            entry.rec = build_instruction(w, region, time, features, subject,
                                          restored.exp.prompt_opts);
            build_target(entry.rec, w, features, subject, restored.exp.prompt_opts.target_mode);
            finalize_positions(entry.rec, restored.exp.bundle.tokenizer);
            entry.window = w;
            auto pred = predict_window(restored.exp.bundle, entry, pr_max_new);

            // splice the numeric lists after each forecasting token
            std::string rendered = pred.answer_text;
            size_t at = 0;
            for (int f = 0; f < w.F; ++f) {
                auto pos = rendered.find(kStPre, at);
                if (pos == std::string::npos) break;
                std::string list = " [";
                for (int i = 0; i < w.P; ++i) {
                    if (i) list += " ";
                    list += std::to_string(llround(double(pred.yhat[size_t(i) * w.F + f])));
                }
                list += "]";
                rendered.insert(pos + std::string(kStPre).size(), list);
                at = pos + std::string(kStPre).size() + list.size();
            }
            std::cout << rendered << "\n";
            nlohmann::json out = {{"answer_text", pred.answer_text},
                                  {"rendered", rendered},
                                  {"predictions", nlohmann::json::array()}};
            for (int f = 0; f < w.F; ++f) {
                nlohmann::json list = nlohmann::json::array();
                for (int i = 0; i < w.P; ++i) list.push_back(pred.yhat[size_t(i) * w.F + f]);
                out["predictions"].push_back({{"feature", features[size_t(f)]}, {"values", list}});
            }
            std::cout << out.dump(2) << "\n";
        }
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
