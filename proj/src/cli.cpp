#include "jamt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "jamt/checkpoint.hpp"
#include "jamt/decoding.hpp"
#include "jamt/error.hpp"
#include "jamt/metrics.hpp"
#include "jamt/model.hpp"
#include "jamt/rng.hpp"
#include "jamt/synthetic.hpp"
#include "jamt/text.hpp"
#include "jamt/train.hpp"

namespace fs = std::filesystem;

namespace jamt::cli {

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read file for hashing: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return fnv1a64(ss.str());
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

void ensure_parent_dir(const std::string& path) {
    fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

std::string fmt_double(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

std::string hex16(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

CLI::Option* find_option(CLI::App* sub, const std::string& key) {
    for (CLI::Option* opt : sub->get_options()) {
        if (opt == sub->get_help_ptr()) continue;
        for (const auto& name : opt->get_lnames())
            if (name == key) return opt;
        if (opt->get_lnames().empty() && opt->get_single_name() == key) return opt;
    }
    return nullptr;
}

// Applies a flat key=value file to the subcommand's options. Keys must name
// known options; values already set on the command line keep priority.
void apply_config_file(CLI::App* sub, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string trimmed = trim(line);
        if (trimmed.empty() || trimmed[0] == '#') continue;
        std::size_t eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = trim(trimmed.substr(0, eq));
        std::string value = trim(trimmed.substr(eq + 1));
        CLI::Option* opt = find_option(sub, key);
        if (opt == nullptr) throw ConfigError("unknown config key: " + key);
        if (opt->count() > 0) continue;
        if (opt->get_expected_max() > 1) {
            std::istringstream parts(value);
            std::string part;
            while (parts >> part) opt->add_result(part);
        } else {
            opt->add_result(value);
        }
        opt->run_callback();
    }
}

void require_value(const std::string& value, const char* key) {
    if (value.empty()) throw ConfigError(std::string("missing required option --") + key);
}

// Echoes the effective configuration (flag > config file > default) plus a
// content hash per input file.
void write_manifest(const std::string& path, const CLI::App* sub,
                    const std::vector<std::string>& inputs) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << "command=" << sub->get_name() << "\n";
    std::map<std::string, std::string> entries;
    for (const CLI::Option* opt : sub->get_options()) {
        if (opt == sub->get_help_ptr() || opt->get_single_name() == "config") continue;
        std::string value = opt->count() > 0 ? join(opt->results(), " ") : opt->get_default_str();
        entries["config." + opt->get_single_name()] = value;
    }
    for (const auto& [key, value] : entries) f << key << "=" << value << "\n";
    for (const auto& input : inputs) f << "input." << input << "=" << hex16(hash_file(input)) << "\n";
    if (!f) throw IoError("write failed for manifest: " + path);
}

std::vector<int> encode_line(const BpeModel& bpe, const std::string& text, bool normalize) {
    std::string s = normalize ? strip_punctuation(text) : text;
    TokenSequence t = bpe.encode(s, normalize ? TextVariant::normalized : TextVariant::punctuated);
    std::vector<int> ids;
    ids.reserve(t.ids.size() + 2);
    ids.push_back(BpeModel::bos_id);
    ids.insert(ids.end(), t.ids.begin(), t.ids.end());
    ids.push_back(BpeModel::eos_id);
    return ids;
}

// Accepts a standalone recognizer checkpoint or the recognizer half of a
// jointly trained one.
AsrModel load_any_asr(const std::string& path) {
    Snapshot snap = load_checkpoint(path);
    auto [kind, cfg] = peek_model_config(snap);
    if (kind == ModelKind::asr) {
        AsrModel m(cfg, 0);
        jamt::detail::assign_params(m.named_parameters(), snap);
        return m;
    }
    if (kind == ModelKind::joint) {
        Snapshot sub;
        for (const auto& [name, tensor] : snap)
            if (name.rfind("asr/", 0) == 0) sub.emplace_back(name.substr(4), tensor);
        AsrModel m(cfg, 0);
        jamt::detail::assign_params(m.named_parameters(), sub);
        return m;
    }
    throw IoError("checkpoint does not hold an asr model: " + path);
}

MtModel load_any_mt(const std::string& path) {
    Snapshot snap = load_checkpoint(path);
    auto [kind, cfg] = peek_model_config(snap);
    if (kind == ModelKind::mt) {
        MtModel m(cfg, 0);
        jamt::detail::assign_params(m.named_parameters(), snap);
        return m;
    }
    if (kind == ModelKind::joint) {
        Snapshot sub;
        for (const auto& [name, tensor] : snap)
            if (name.rfind("mt/", 0) == 0) sub.emplace_back(name.substr(3), tensor);
        MtModel m(cfg, 0);
        jamt::detail::assign_params(m.named_parameters(), sub);
        return m;
    }
    throw IoError("checkpoint does not hold an mt model: " + path);
}

// Copies checkpoint values into every model parameter matching the prefix.
void apply_init(const std::vector<std::pair<std::string, Tensor>>& params, const std::string& path,
                const std::string& prefix) {
    Snapshot snap = load_checkpoint(path);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, tensor] : snap)
        if (name != "meta/config") by_name[name] = &tensor;
    std::size_t matched = 0;
    for (const auto& [name, p] : params) {
        if (name.rfind(prefix, 0) != 0) continue;
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("init checkpoint missing parameter " + name + ": " + path);
        if (it->second->shape() != p.shape())
            throw IoError("init checkpoint shape mismatch for " + name + ": " + path);
        const_cast<Tensor&>(p).values() = it->second->values();
        ++matched;
    }
    if (matched == 0) throw ValueError("init prefix matches no parameters: '" + prefix + "'");
}

std::vector<std::string> corpus_input_files(const std::string& dir) {
    std::vector<std::string> files = {dir + "/ids.txt", dir + "/src.txt", dir + "/tgt.txt"};
    return files;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

struct ScoreOpts {
    std::string metric = "wer";
    std::string ref, hyp;
    int normalize = 0;
    std::string manifest;
};

int command_score(const ScoreOpts& o, const CLI::App* sub) {
    require_value(o.ref, "ref");
    require_value(o.hyp, "hyp");
    std::vector<std::string> refs = read_lines(o.ref);
    std::vector<std::string> hyps = read_lines(o.hyp);
    if (refs.size() != hyps.size())
        throw ValueError("reference and hypothesis files differ in line count");
    if (refs.empty()) throw ValueError("empty scoring input");
    if (o.normalize) {
        for (auto& s : refs) s = strip_punctuation(s);
        for (auto& s : hyps) s = strip_punctuation(s);
    }
    if (o.metric == "wer") {
        long long edits = 0, reflen = 0;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            WerResult r = wer(refs[i], hyps[i]);
            edits += r.alignment.substitutions + r.alignment.insertions + r.alignment.deletions;
            reflen += r.alignment.matches + r.alignment.substitutions + r.alignment.deletions;
        }
        if (reflen == 0) throw ValueError("reference corpus has no words");
        std::cout << "WER "
                  << fmt_double("%.4f", static_cast<double>(edits) / static_cast<double>(reflen))
                  << "\n";
    } else if (o.metric == "bleu") {
        std::cout << "BLEU " << fmt_double("%.2f", corpus_bleu(refs, hyps)) << "\n";
    } else {
        throw ConfigError("unknown metric: " + o.metric);
    }
    if (!o.manifest.empty()) write_manifest(o.manifest, sub, {o.ref, o.hyp});
    return exit_ok;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataOpts {
    std::string out;
    std::uint64_t seed = 1;
    int src_vocab = 30, tgt_vocab = 30;
    int frames_per_token = 3, feature_dim = 8;
    double sigma = 0.0;
    int punctuated = 1;
    int min_len = 2, max_len = 8;
    int asr_pairs = 200, mt_pairs = 200, st_triplets = 100, text_pairs = 200, test_items = 50;
    double corrupt_fraction = 0.0;
    std::string manifest;
};

int command_gen_data(const GenDataOpts& o, const CLI::App* sub) {
    require_value(o.out, "out");
    SyntheticSpec spec;
    spec.src_vocab = o.src_vocab;
    spec.tgt_vocab = o.tgt_vocab;
    spec.frames_per_token = o.frames_per_token;
    spec.feature_dim = o.feature_dim;
    spec.sigma = o.sigma;
    spec.punctuated = o.punctuated != 0;
    spec.seed = o.seed;
    spec.min_sentence_len = o.min_len;
    spec.max_sentence_len = o.max_len;
    CorpusSizes sizes;
    sizes.asr_pairs = o.asr_pairs;
    sizes.mt_pairs = o.mt_pairs;
    sizes.st_triplets = o.st_triplets;
    sizes.text_pairs = o.text_pairs;
    sizes.test_items = o.test_items;
    sizes.corrupt_fraction = o.corrupt_fraction;
    Corpora corpora = generate_corpora(spec, sizes);
    write_corpus(o.out + "/asr", corpora.asr_pairs);
    write_corpus(o.out + "/mt", corpora.mt_pairs);
    write_corpus(o.out + "/st", corpora.st_triplets);
    write_corpus(o.out + "/text", corpora.text_pairs);
    write_corpus(o.out + "/test", corpora.test_items);
    std::ofstream ids(o.out + "/corrupted_ids.txt", std::ios::binary);
    if (!ids) throw IoError("cannot write corrupted id list");
    for (const auto& id : corpora.corrupted_ids) ids << id << "\n";
    std::string manifest = o.manifest.empty() ? o.out + "/manifest.txt" : o.manifest;
    write_manifest(manifest, sub, {});
    return exit_ok;
}

// ---------------------------------------------------------------------------
// tok-train
// ---------------------------------------------------------------------------

struct TokTrainOpts {
    std::string in, out;
    int merges = 100;
    int normalize = 0;
    std::string manifest;
};

int command_tok_train(const TokTrainOpts& o, const CLI::App* sub) {
    require_value(o.in, "in");
    require_value(o.out, "out");
    std::vector<std::string> lines = read_lines(o.in);
    if (o.normalize)
        for (auto& s : lines) s = strip_punctuation(s);
    BpeModel bpe = BpeModel::train(lines, o.merges);
    ensure_parent_dir(o.out);
    bpe.save(o.out);
    std::string manifest = o.manifest.empty() ? o.out + ".manifest" : o.manifest;
    write_manifest(manifest, sub, {o.in});
    return exit_ok;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string mode;
    std::string data, text_data;
    std::string bpe_src, bpe_tgt;
    int normalize = 0;
    std::vector<std::string> init;
    std::vector<std::string> init_select;
    int d_model = 64, heads = 4, ff_dim = 256, enc_layers = 2, dec_layers = 2, max_len = 256;
    double dropout = 0.0;
    int feature_dim = 8;
    int steps = 100, batch_size = 8, warmup = 400;
    double lr_scale = 1.0, lambda = 0.5, smoothing = 0.0;
    int ratio = 1;
    std::uint64_t seed = 1;
    int log_every = 0, save_every = 0;
    std::string out;
    std::string manifest;
};

struct EncodedCorpus {
    std::vector<TrainItem> items;
    int feature_dim = 0;
};

EncodedCorpus encode_corpus(const std::vector<SyntheticItem>& raw, const BpeModel& src_bpe,
                            const BpeModel* tgt_bpe, bool normalize, bool need_feats, bool need_tgt) {
    if (raw.empty()) throw ValueError("empty training corpus");
    EncodedCorpus out;
    for (const auto& item : raw) {
        TrainItem t;
        t.id = item.id;
        if (need_feats) {
            if (!item.feats.defined()) throw ValueError("corpus item lacks features: " + item.id);
            t.feats = item.feats;
            out.feature_dim = item.feats.dim(1);
        }
        t.src = encode_line(src_bpe, item.src_text, normalize);
        if (need_tgt) t.tgt = encode_line(*tgt_bpe, item.tgt_text, normalize);
        out.items.push_back(std::move(t));
    }
    return out;
}

int command_train(const TrainOpts& o, const CLI::App* sub) {
    require_value(o.mode, "mode");
    require_value(o.data, "data");
    require_value(o.bpe_src, "bpe-src");
    require_value(o.out, "out");
    bool lm_mode = o.mode == "lm";
    bool joint_modes = o.mode == "asr" || o.mode == "mt" || o.mode == "joint" || o.mode == "adapt";
    if (!lm_mode && !joint_modes) throw ConfigError("unknown train mode: " + o.mode);
    if (o.steps < 1) throw ValueError("steps must be >= 1");

    BpeModel src_bpe = BpeModel::load(o.bpe_src);
    std::vector<std::string> inputs = corpus_input_files(o.data);
    inputs.push_back(o.bpe_src);

    TransformerConfig cfg;
    cfg.d_model = o.d_model;
    cfg.n_heads = o.heads;
    cfg.ff_dim = o.ff_dim;
    cfg.enc_layers = o.enc_layers;
    cfg.dec_layers = o.dec_layers;
    cfg.max_len = o.max_len;
    cfg.dropout = static_cast<float>(o.dropout);
    cfg.feature_dim = o.feature_dim;
    cfg.src_vocab = src_bpe.vocab_size();

    Rng drop_rng(o.seed ^ 0x9e3779b97f4a7c15ull);
    Rng* drop = cfg.dropout > 0.0f ? &drop_rng : nullptr;
    float smoothing = static_cast<float>(o.smoothing);

    std::string manifest = o.manifest.empty() ? o.out + ".manifest" : o.manifest;
    ensure_parent_dir(o.out);

    if (lm_mode) {
        std::vector<SyntheticItem> raw = read_corpus(o.data);
        EncodedCorpus corpus = encode_corpus(raw, src_bpe, nullptr, o.normalize != 0, false, false);
        LanguageModel lm(cfg, o.seed);
        for (std::size_t i = 0; i < o.init.size(); ++i)
            apply_init(lm.named_parameters(), o.init[i],
                       i < o.init_select.size() ? o.init_select[i] : "");
        for (const auto& p : o.init) inputs.push_back(p);
        Optimizer opt(lm.named_parameters(), cfg.d_model, o.warmup, o.lr_scale);
        Batcher batcher(corpus.items, BatchKind::text_only, o.batch_size, o.seed + 1);
        for (int step = 1; step <= o.steps; ++step) {
            double loss = lm_step(lm, opt, batcher.next(), drop, smoothing);
            if (o.log_every > 0 && step % o.log_every == 0)
                std::cout << "step " << step << " loss " << fmt_double("%.6f", loss) << "\n";
            if (o.save_every > 0 && step % o.save_every == 0)
                save_model(o.out + ".step" + std::to_string(step), lm);
        }
        save_model(o.out, lm);
        write_manifest(manifest, sub, inputs);
        return exit_ok;
    }

    if (o.bpe_tgt.empty()) throw ConfigError("train mode " + o.mode + " needs --bpe-tgt");
    BpeModel tgt_bpe = BpeModel::load(o.bpe_tgt);
    inputs.push_back(o.bpe_tgt);
    cfg.tgt_vocab = tgt_bpe.vocab_size();

    bool need_feats = o.mode != "mt";
    BatchKind kind = o.mode == "asr"  ? BatchKind::asr_pair
                     : o.mode == "mt" ? BatchKind::mt_pair
                                      : BatchKind::st_triplet;
    std::vector<SyntheticItem> raw = read_corpus(o.data);
    EncodedCorpus corpus = encode_corpus(raw, src_bpe, &tgt_bpe, o.normalize != 0, need_feats, true);
    if (corpus.feature_dim > 0) cfg.feature_dim = corpus.feature_dim;

    JointModel model(cfg, o.seed);
    for (std::size_t i = 0; i < o.init.size(); ++i)
        apply_init(model.named_parameters(), o.init[i],
                   i < o.init_select.size() ? o.init_select[i] : "");
    for (const auto& p : o.init) inputs.push_back(p);
    Optimizer opt(model.named_parameters(), cfg.d_model, o.warmup, o.lr_scale);

    if (o.mode == "adapt") {
        if (o.text_data.empty()) throw ConfigError("train mode adapt needs --text-data");
        std::vector<SyntheticItem> raw_text = read_corpus(o.text_data);
        EncodedCorpus text = encode_corpus(raw_text, src_bpe, &tgt_bpe, o.normalize != 0, false, true);
        for (const auto& f : corpus_input_files(o.text_data)) inputs.push_back(f);
        Batcher st_batcher(corpus.items, BatchKind::st_triplet, o.batch_size, o.seed + 1);
        Batcher text_batcher(text.items, BatchKind::text_only, o.batch_size, o.seed + 2);
        AlternateResult res =
            alternate_train(model, opt, [&] { return st_batcher.next(); },
                            [&] { return text_batcher.next(); }, o.ratio, o.steps, o.lambda, drop,
                            smoothing);
        if (o.log_every > 0)
            for (std::size_t i = 0; i < res.losses.size(); ++i)
                if ((i + 1) % static_cast<std::size_t>(o.log_every) == 0)
                    std::cout << "step " << i + 1 << " " << res.pattern[i] << " loss "
                              << fmt_double("%.6f", res.losses[i]) << "\n";
    } else {
        Batcher batcher(corpus.items, kind, o.batch_size, o.seed + 1);
        for (int step = 1; step <= o.steps; ++step) {
            double loss = 0.0;
            if (o.mode == "asr")
                loss = pretrain_asr_step(model, opt, batcher.next(), drop, smoothing);
            else if (o.mode == "mt")
                loss = pretrain_mt_step(model, opt, batcher.next(), drop, smoothing);
            else
                loss = multitask_step(model, opt, batcher.next(), o.lambda, drop, smoothing).total;
            if (o.log_every > 0 && step % o.log_every == 0)
                std::cout << "step " << step << " loss " << fmt_double("%.6f", loss) << "\n";
            if (o.save_every > 0 && step % o.save_every == 0)
                save_model(o.out + ".step" + std::to_string(step), model);
        }
    }
    save_model(o.out, model);
    write_manifest(manifest, sub, inputs);
    return exit_ok;
}

// ---------------------------------------------------------------------------
// avg-ckpt
// ---------------------------------------------------------------------------

struct AvgCkptOpts {
    std::vector<std::string> inputs;
    std::string out;
    std::string manifest;
};

int command_avg_ckpt(const AvgCkptOpts& o, const CLI::App* sub) {
    if (o.inputs.empty()) throw ConfigError("avg-ckpt needs at least one input checkpoint");
    require_value(o.out, "out");
    std::vector<Snapshot> snapshots;
    for (const auto& path : o.inputs) snapshots.push_back(load_checkpoint(path));
    Snapshot mean = average_checkpoints(snapshots);
    ensure_parent_dir(o.out);
    save_checkpoint(o.out, mean);
    std::string manifest = o.manifest.empty() ? o.out + ".manifest" : o.manifest;
    write_manifest(manifest, sub, o.inputs);
    return exit_ok;
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

struct DecodeOpts {
    std::string mode;
    std::string data;
    std::string joint, ext_asr, ext_mt, lm;
    std::string weights = "0.5,0.5";
    int beam = 4, nbest = 4;
    double length_ratio = 1.2, alpha = 0.0, eos_factor = 1.0, lm_weight = 0.0;
    std::string bpe_src, bpe_tgt;
    int threads = 1;
    std::string out;
    std::string manifest;
};

std::vector<double> parse_weight_pair(const std::string& s) {
    std::size_t comma = s.find(',');
    if (comma == std::string::npos) throw ConfigError("weights must be two comma-separated numbers");
    try {
        std::size_t used = 0;
        double a = std::stod(s.substr(0, comma), &used);
        if (used != comma) throw ConfigError("bad weights: " + s);
        std::string rest = s.substr(comma + 1);
        double b = std::stod(rest, &used);
        if (used != rest.size()) throw ConfigError("bad weights: " + s);
        return {a, b};
    } catch (const std::invalid_argument&) {
        throw ConfigError("bad weights: " + s);
    } catch (const std::out_of_range&) {
        throw ConfigError("bad weights: " + s);
    }
}

int command_decode(const DecodeOpts& o, const CLI::App* sub) {
    require_value(o.mode, "mode");
    require_value(o.data, "data");
    require_value(o.bpe_src, "bpe-src");
    require_value(o.bpe_tgt, "bpe-tgt");
    require_value(o.out, "out");
    CascadeMode mode = parse_cascade_mode(o.mode == "ens" ? "ensemble" : o.mode);
    if (o.threads < 1) throw ValueError("threads must be >= 1");

    DecodeConfig cfg;
    cfg.beam_size = o.beam;
    cfg.n_best = o.nbest;
    cfg.length_ratio = o.length_ratio;
    cfg.alpha = o.alpha;
    cfg.eos_factor = o.eos_factor;
    cfg.lm_weight = o.lm_weight;
    cfg.validate();

    BpeModel src_bpe = BpeModel::load(o.bpe_src);
    BpeModel tgt_bpe = BpeModel::load(o.bpe_tgt);

    std::optional<JointModel> joint_model;
    std::optional<AsrModel> ext_asr_model;
    std::optional<MtModel> ext_mt_model;
    std::optional<LanguageModel> lm_model;
    CascadeModels models;
    std::vector<std::string> inputs = corpus_input_files(o.data);
    inputs.push_back(o.bpe_src);
    inputs.push_back(o.bpe_tgt);
    if (!o.joint.empty()) {
        joint_model.emplace(load_joint_model(o.joint));
        models.joint = &*joint_model;
        inputs.push_back(o.joint);
    }
    if (!o.ext_asr.empty()) {
        ext_asr_model.emplace(load_any_asr(o.ext_asr));
        models.ext_asr = &*ext_asr_model;
        inputs.push_back(o.ext_asr);
    }
    if (!o.ext_mt.empty()) {
        ext_mt_model.emplace(load_any_mt(o.ext_mt));
        models.ext_mt = &*ext_mt_model;
        inputs.push_back(o.ext_mt);
    }
    if (!o.lm.empty()) {
        lm_model.emplace(load_lm_model(o.lm));
        models.asr_lm = &*lm_model;
        inputs.push_back(o.lm);
    }
    std::vector<double> weights = parse_weight_pair(o.weights);
    models.asr_ensemble_weights = weights;
    models.mt_ensemble_weights = weights;

    std::vector<SyntheticItem> corpus = read_corpus(o.data);
    if (corpus.empty()) throw ValueError("empty decode corpus");
    for (const auto& item : corpus)
        if (!item.feats.defined()) throw ValueError("corpus item lacks features: " + item.id);

    std::vector<std::string> lines(corpus.size());
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto work = [&](int tid) {
        try {
            for (std::size_t i = static_cast<std::size_t>(tid); i < corpus.size();
                 i += static_cast<std::size_t>(o.threads)) {
                CascadeOutput out = cascade_pipeline(mode, models, corpus[i].feats, cfg);
                lines[i] = corpus[i].id + "\t" + src_bpe.decode(out.asr_best_tokens) + "\t" +
                           tgt_bpe.decode(out.tgt_tokens) + "\t" + fmt_double("%.6f", out.log_p_z) +
                           "\t" + fmt_double("%.6f", out.log_p_y);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };
    if (o.threads == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (int tid = 0; tid < o.threads; ++tid) pool.emplace_back(work, tid);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    ensure_parent_dir(o.out);
    std::ofstream f(o.out, std::ios::binary);
    if (!f) throw IoError("cannot write decode output: " + o.out);
    for (const auto& line : lines) f << line << "\n";
    if (!f) throw IoError("write failed for decode output: " + o.out);

    std::string manifest = o.manifest.empty() ? o.out + ".manifest" : o.manifest;
    write_manifest(manifest, sub, inputs);
    return exit_ok;
}

// ---------------------------------------------------------------------------
// prune
// ---------------------------------------------------------------------------

struct PruneOpts {
    std::string data;
    std::string model;
    std::string bpe_src;
    int normalize = 0;
    double threshold = 0.5;
    int beam = 4;
    double length_ratio = 1.2, alpha = 0.0, eos_factor = 1.0;
    std::string out;
    std::string report;
    std::string manifest;
};

int command_prune(const PruneOpts& o, const CLI::App* sub) {
    require_value(o.data, "data");
    require_value(o.model, "model");
    require_value(o.bpe_src, "bpe-src");
    require_value(o.out, "out");
    BpeModel src_bpe = BpeModel::load(o.bpe_src);
    AsrModel asr = load_any_asr(o.model);
    std::vector<SyntheticItem> corpus = read_corpus(o.data);
    if (corpus.empty()) throw ValueError("empty prune corpus");

    DecodeConfig cfg;
    cfg.beam_size = o.beam;
    cfg.n_best = 1;
    cfg.length_ratio = o.length_ratio;
    cfg.alpha = o.alpha;
    cfg.eos_factor = o.eos_factor;
    cfg.validate();

    std::vector<PruneItem> items;
    for (const auto& item : corpus) {
        if (!item.feats.defined()) throw ValueError("corpus item lacks features: " + item.id);
        std::string ref = o.normalize ? strip_punctuation(item.src_text) : item.src_text;
        items.push_back({item.id, item.feats, ref});
    }
    auto recognize = [&](const PruneItem& item) {
        Tensor enc = encode_features(asr, item.feats);
        AsrScorer scorer(asr, enc);
        std::vector<BeamHypothesis> nbest = beam_search(scorer, enc.dim(0), cfg);
        std::string hyp = src_bpe.decode(nbest[0].tokens);
        return o.normalize ? strip_punctuation(hyp) : hyp;
    };
    PruneResult result = prune_corpus(recognize, items, o.threshold);

    std::vector<SyntheticItem> kept;
    for (std::size_t idx : result.kept) kept.push_back(corpus[idx]);
    write_corpus(o.out, kept);
    std::string report = o.report.empty() ? o.out + "/dropped.txt" : o.report;
    ensure_parent_dir(report);
    std::ofstream f(report, std::ios::binary);
    if (!f) throw IoError("cannot write prune report: " + report);
    for (const auto& drop : result.dropped)
        f << drop.id << "\t" << fmt_double("%.4f", drop.wer) << "\n";

    std::vector<std::string> inputs = corpus_input_files(o.data);
    inputs.push_back(o.model);
    inputs.push_back(o.bpe_src);
    std::string manifest = o.manifest.empty() ? o.out + "/manifest.txt" : o.manifest;
    write_manifest(manifest, sub, inputs);
    return exit_ok;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"speech translation cascade toolkit", "jamt"};
    app.require_subcommand(1);

    std::map<CLI::App*, std::string> config_paths;
    auto make_sub = [&](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->option_defaults()->always_capture_default();
        sub->add_option("--config", config_paths[sub], "flat key=value configuration file");
        return sub;
    };

    ScoreOpts so;
    CLI::App* score = make_sub("score", "score line-aligned hypothesis files");
    score->add_option("--metric", so.metric, "wer or bleu");
    score->add_option("--normalize", so.normalize, "strip punctuation and lowercase before scoring");
    score->add_option("--manifest", so.manifest, "manifest path (empty skips)");
    score->add_option("ref", so.ref, "reference file");
    score->add_option("hyp", so.hyp, "hypothesis file");

    GenDataOpts go;
    CLI::App* gen = make_sub("gen-data", "generate the synthetic corpora");
    gen->add_option("--out", go.out, "output directory");
    gen->add_option("--seed", go.seed, "generator seed");
    gen->add_option("--src-vocab", go.src_vocab, "source word inventory");
    gen->add_option("--tgt-vocab", go.tgt_vocab, "target word inventory");
    gen->add_option("--frames-per-token", go.frames_per_token, "feature frames per token");
    gen->add_option("--feature-dim", go.feature_dim, "feature vector width");
    gen->add_option("--sigma", go.sigma, "feature noise stddev");
    gen->add_option("--punctuated", go.punctuated, "attach ./? sentence endings");
    gen->add_option("--min-len", go.min_len, "shortest sentence length");
    gen->add_option("--max-len", go.max_len, "longest sentence length");
    gen->add_option("--asr-pairs", go.asr_pairs, "recognition pair count");
    gen->add_option("--mt-pairs", go.mt_pairs, "translation pair count");
    gen->add_option("--st-triplets", go.st_triplets, "speech translation triplet count");
    gen->add_option("--text-pairs", go.text_pairs, "text-only pair count");
    gen->add_option("--test-items", go.test_items, "held-out item count");
    gen->add_option("--corrupt-fraction", go.corrupt_fraction, "fraction of shifted transcripts");
    gen->add_option("--manifest", go.manifest, "manifest path");

    TokTrainOpts to;
    CLI::App* tok = make_sub("tok-train", "train a byte-pair tokenizer");
    tok->add_option("--in", to.in, "training text file");
    tok->add_option("--out", to.out, "tokenizer output path");
    tok->add_option("--merges", to.merges, "merge rule count");
    tok->add_option("--normalize", to.normalize, "strip punctuation before training");
    tok->add_option("--manifest", to.manifest, "manifest path");

    TrainOpts tr;
    CLI::App* train = make_sub("train", "train a model");
    train->add_option("--mode", tr.mode, "asr, mt, joint, adapt, or lm");
    train->add_option("--data", tr.data, "corpus directory");
    train->add_option("--text-data", tr.text_data, "text-only corpus directory (adapt)");
    train->add_option("--bpe-src", tr.bpe_src, "source tokenizer");
    train->add_option("--bpe-tgt", tr.bpe_tgt, "target tokenizer");
    train->add_option("--normalize", tr.normalize, "encode punctuation-stripped text");
    train->add_option("--init", tr.init, "initializer checkpoints");
    train->add_option("--init-select", tr.init_select, "parameter name prefix per --init entry");
    train->add_option("--d-model", tr.d_model, "model width");
    train->add_option("--heads", tr.heads, "attention heads");
    train->add_option("--ff-dim", tr.ff_dim, "feed-forward width");
    train->add_option("--enc-layers", tr.enc_layers, "encoder layers");
    train->add_option("--dec-layers", tr.dec_layers, "decoder layers");
    train->add_option("--max-len", tr.max_len, "positional table length");
    train->add_option("--dropout", tr.dropout, "dropout probability");
    train->add_option("--feature-dim", tr.feature_dim, "feature width for featureless corpora");
    train->add_option("--steps", tr.steps, "optimizer steps");
    train->add_option("--batch-size", tr.batch_size, "items per batch");
    train->add_option("--warmup", tr.warmup, "warmup steps");
    train->add_option("--lr-scale", tr.lr_scale, "learning-rate scale");
    train->add_option("--lambda", tr.lambda, "recognition loss weight");
    train->add_option("--smoothing", tr.smoothing, "label smoothing mass");
    train->add_option("--ratio", tr.ratio, "text steps per st step (adapt)");
    train->add_option("--seed", tr.seed, "training seed");
    train->add_option("--log-every", tr.log_every, "loss print interval (0 silences)");
    train->add_option("--save-every", tr.save_every, "snapshot interval (0 disables)");
    train->add_option("--out", tr.out, "checkpoint output path");
    train->add_option("--manifest", tr.manifest, "manifest path");

    AvgCkptOpts av;
    CLI::App* avg = make_sub("avg-ckpt", "average parameter checkpoints");
    avg->add_option("inputs", av.inputs, "checkpoints to average")->expected(-1);
    avg->add_option("-o,--out", av.out, "averaged checkpoint path");
    avg->add_option("--manifest", av.manifest, "manifest path");

    DecodeOpts de;
    CLI::App* dec = make_sub("decode", "run the two-stage cascade over a corpus");
    dec->add_option("--mode", de.mode, "ext-ext, ext-joint, joint-ext, joint-joint, or ens");
    dec->add_option("--data", de.data, "corpus directory with features");
    dec->add_option("--joint", de.joint, "joint checkpoint");
    dec->add_option("--ext-asr", de.ext_asr, "external recognizer checkpoint");
    dec->add_option("--ext-mt", de.ext_mt, "external translator checkpoint");
    dec->add_option("--lm", de.lm, "language model checkpoint for fusion");
    dec->add_option("--weights", de.weights, "ensemble weight pair ext,joint");
    dec->add_option("--beam", de.beam, "beam size");
    dec->add_option("--nbest", de.nbest, "source hypotheses fed to the coupled search");
    dec->add_option("--length-ratio", de.length_ratio, "output length cap ratio");
    dec->add_option("--alpha", de.alpha, "per-token insertion reward");
    dec->add_option("--eos-factor", de.eos_factor, "end-of-sequence admission factor");
    dec->add_option("--lm-weight", de.lm_weight, "fusion weight");
    dec->add_option("--bpe-src", de.bpe_src, "source tokenizer");
    dec->add_option("--bpe-tgt", de.bpe_tgt, "target tokenizer");
    dec->add_option("--threads", de.threads, "utterance-parallel worker count");
    dec->add_option("--out", de.out, "hypothesis file");
    dec->add_option("--manifest", de.manifest, "manifest path");

    PruneOpts pr;
    CLI::App* prune = make_sub("prune", "drop utterances with unreliable transcripts");
    prune->add_option("--data", pr.data, "corpus directory");
    prune->add_option("--model", pr.model, "recognizer checkpoint");
    prune->add_option("--bpe-src", pr.bpe_src, "source tokenizer");
    prune->add_option("--normalize", pr.normalize, "strip punctuation before scoring");
    prune->add_option("--threshold", pr.threshold, "maximum word error rate kept");
    prune->add_option("--beam", pr.beam, "beam size");
    prune->add_option("--length-ratio", pr.length_ratio, "output length cap ratio");
    prune->add_option("--alpha", pr.alpha, "per-token insertion reward");
    prune->add_option("--eos-factor", pr.eos_factor, "end-of-sequence admission factor");
    prune->add_option("--out", pr.out, "kept corpus directory");
    prune->add_option("--report", pr.report, "dropped id report path");
    prune->add_option("--manifest", pr.manifest, "manifest path");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
        CLI::App* parsed = nullptr;
        for (auto& [sub, path] : config_paths)
            if (sub->parsed()) {
                parsed = sub;
                if (!path.empty()) apply_config_file(sub, path);
            }
        if (parsed == score) return command_score(so, score);
        if (parsed == gen) return command_gen_data(go, gen);
        if (parsed == tok) return command_tok_train(to, tok);
        if (parsed == train) return command_train(tr, train);
        if (parsed == avg) return command_avg_ckpt(av, avg);
        if (parsed == dec) return command_decode(de, dec);
        if (parsed == prune) return command_prune(pr, prune);
        throw ConfigError("no subcommand given");
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_divergence;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_io;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_config;
    }
}

}  // namespace jamt::cli
