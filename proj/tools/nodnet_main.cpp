// nodnet: two-stage lung nodule detection pipeline on synthetic phantoms or
// MetaImage CT volumes. Subcommands cover data generation, preparation,
// adversarial segmenter training, patch classifier training, evaluation,
// RISE saliency, static cost analysis, and the end-to-end pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "nodnet/cost.hpp"
#include "nodnet/dataset.hpp"
#include "nodnet/metrics.hpp"
#include "nodnet/mhd.hpp"
#include "nodnet/phantom.hpp"
#include "nodnet/rise.hpp"
#include "nodnet/serialize.hpp"
#include "nodnet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nodnet;

namespace {

// ---------------------------------------------------------------------------
// Run configuration: one flat struct shared by all subcommands. A --config
// JSON file provides defaults; command-line flags override it.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string subcommand;
    std::string data_dir;
    std::string out_dir;
    std::string weights;
    std::uint64_t seed = 0;
    bool deterministic = false;

    // gen-data / pipeline phantom knobs
    int count = 50;
    int size = 64;
    int slices = 8;
    double wall_attach_probability = 0.3;
    double noise_amplitude = 0.03;

    // prep
    int stride = kDefaultPatchStride;
    bool balance = true;
    double hu_center = -600.0;
    double hu_width = 1500.0;

    // training
    std::string scale = "tiny";
    double alpha = 0.001;
    double learning_rate = 1e-4;
    int epochs_stage1 = 35;
    int epochs_stage2 = 50;
    int batch_size = 4;
    int max_iterations = 0;
    int folds = 10;
    int fold = 0;

    // saliency
    int rise_masks = 1000;
    int rise_grid = 8;
    double rise_keep = 0.5;
    int index = -1;
    int saliency_count = 4;

    // cost
    std::string net = "classifier";
    std::string input_size;
    bool macs_only = false;
    bool csv = false;
};

json to_json(const RunConfig& c) {
    return json{{"subcommand", c.subcommand},
                {"data", c.data_dir},
                {"out", c.out_dir},
                {"weights", c.weights},
                {"seed", c.seed},
                {"deterministic", c.deterministic},
                {"count", c.count},
                {"size", c.size},
                {"slices", c.slices},
                {"wall_attach_probability", c.wall_attach_probability},
                {"noise_amplitude", c.noise_amplitude},
                {"stride", c.stride},
                {"balance", c.balance},
                {"hu_center", c.hu_center},
                {"hu_width", c.hu_width},
                {"scale", c.scale},
                {"alpha", c.alpha},
                {"learning_rate", c.learning_rate},
                {"epochs_stage1", c.epochs_stage1},
                {"epochs_stage2", c.epochs_stage2},
                {"batch_size", c.batch_size},
                {"max_iterations", c.max_iterations},
                {"folds", c.folds},
                {"fold", c.fold},
                {"rise_masks", c.rise_masks},
                {"rise_grid", c.rise_grid},
                {"rise_keep", c.rise_keep},
                {"index", c.index},
                {"saliency_count", c.saliency_count},
                {"net", c.net},
                {"input_size", c.input_size},
                {"macs_only", c.macs_only},
                {"csv", c.csv}};
}

void from_json_file(const std::string& path, RunConfig& c) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("config " + path + " is not valid JSON: " + std::string(e.what()));
    }
    const auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("data", c.data_dir);
    get("out", c.out_dir);
    get("weights", c.weights);
    get("seed", c.seed);
    get("deterministic", c.deterministic);
    get("count", c.count);
    get("size", c.size);
    get("slices", c.slices);
    get("wall_attach_probability", c.wall_attach_probability);
    get("noise_amplitude", c.noise_amplitude);
    get("stride", c.stride);
    get("balance", c.balance);
    get("hu_center", c.hu_center);
    get("hu_width", c.hu_width);
    get("scale", c.scale);
    get("alpha", c.alpha);
    get("learning_rate", c.learning_rate);
    get("epochs_stage1", c.epochs_stage1);
    get("epochs_stage2", c.epochs_stage2);
    get("batch_size", c.batch_size);
    get("max_iterations", c.max_iterations);
    get("folds", c.folds);
    get("fold", c.fold);
    get("rise_masks", c.rise_masks);
    get("rise_grid", c.rise_grid);
    get("rise_keep", c.rise_keep);
    get("index", c.index);
    get("saliency_count", c.saliency_count);
    get("net", c.net);
    get("input_size", c.input_size);
    get("macs_only", c.macs_only);
    get("csv", c.csv);
}

void write_run_json(const RunConfig& c) {
    fs::create_directories(c.out_dir);
    atomic_write_file((fs::path(c.out_dir) / "run.json").string(), to_json(c).dump(2) + "\n");
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

Scale parse_scale(const std::string& s) {
    if (s == "tiny") return Scale::Tiny;
    if (s == "full") return Scale::Full;
    throw std::invalid_argument("scale must be tiny or full, got " + s);
}

TrainConfig train_config(const RunConfig& c) {
    TrainConfig t;
    t.alpha = c.alpha;
    t.learning_rate = c.learning_rate;
    t.epochs_stage1 = c.epochs_stage1;
    t.epochs_stage2 = c.epochs_stage2;
    t.batch_size = c.batch_size;
    t.seed = c.seed;
    t.max_iterations = c.max_iterations;
    t.validate();
    return t;
}

// ---------------------------------------------------------------------------
// Dataset directory layouts
// ---------------------------------------------------------------------------

std::string series_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "phantom_%04d", i);
    return buf;
}

// gen-data output: volumes/<series>.mhd, lungmasks/<series>.mhd,
// annotations.csv
void cmd_gen_data(const RunConfig& cfg) {
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "volumes");
    fs::create_directories(out / "lungmasks");

    PhantomConfig pc;
    pc.size = cfg.size;
    pc.slices = cfg.slices;
    pc.wall_attach_probability = cfg.wall_attach_probability;
    pc.noise_amplitude = cfg.noise_amplitude;
    pc.seed = cfg.seed;
    // diameters scale with the slice so nodules stay desk-sized
    pc.nodule_diameter_px = {std::max(3, cfg.size / 16), std::max(4, cfg.size / 7)};

    std::vector<NoduleAnnotation> all;
    for (int i = 0; i < cfg.count; ++i) {
        const std::string series = series_name(i);
        const Phantom ph = phantom_generate(pc, series);
        write_mhd(ph.meta, ph.image, (out / "volumes" / (series + ".mhd")).string());
        VolumeMeta mask_meta = ph.meta;
        mask_meta.element_type = MhdElementType::Int16;
        write_mhd(mask_meta, ph.lung_mask, (out / "lungmasks" / (series + ".mhd")).string());
        all.insert(all.end(), ph.annotations.begin(), ph.annotations.end());
    }
    write_annotations(all, (out / "annotations.csv").string());
    write_run_json(cfg);
    std::cout << "gen-data: wrote " << cfg.count << " volumes (" << cfg.size << "x" << cfg.size << "x" << cfg.slices
              << ") to " << cfg.out_dir << "\n";
}

struct SliceEntry {
    int id = 0;
    std::string series;
    int z = 0;
    bool has_nodule = false;
};

void write_index(const std::vector<SliceEntry>& entries, const std::string& path) {
    std::string out = "slice_id,series,z,has_nodule\n";
    for (const auto& e : entries)
        out += std::to_string(e.id) + "," + e.series + "," + std::to_string(e.z) + "," + (e.has_nodule ? "1" : "0") +
               "\n";
    atomic_write_file(path, out);
}

std::vector<SliceEntry> read_index(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("slice_id,series,z,has_nodule", 0) != 0)
        throw DataError("bad index header in " + path);
    std::vector<SliceEntry> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        SliceEntry e;
        std::istringstream ls(line);
        std::string field;
        std::getline(ls, field, ',');
        e.id = std::stoi(field);
        std::getline(ls, e.series, ',');
        std::getline(ls, field, ',');
        e.z = std::stoi(field);
        std::getline(ls, field, ',');
        e.has_nodule = field == "1";
        out.push_back(std::move(e));
    }
    return out;
}

std::string slice_stem(int id, const char* kind) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "slice_%05d_%s", id, kind);
    return buf;
}

// prep output: slices/slice_XXXXX_{img,lung,nod}.mhd, index.csv,
// patches.pch, patches_meta.csv
void cmd_prep(const RunConfig& cfg) {
    const fs::path data(cfg.data_dir);
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "slices");

    const auto annotations = read_annotations((data / "annotations.csv").string());

    std::vector<fs::path> volume_headers;
    if (!fs::is_directory(data / "volumes")) throw DataError("prep: missing directory " + (data / "volumes").string());
    for (const auto& entry : fs::directory_iterator(data / "volumes"))
        if (entry.path().extension() == ".mhd") volume_headers.push_back(entry.path());
    std::sort(volume_headers.begin(), volume_headers.end());
    if (volume_headers.empty()) throw DataError("prep: no .mhd volumes under " + (data / "volumes").string());

    std::vector<SliceEntry> index;
    std::vector<PatchRecord> patches;
    std::vector<std::pair<std::string, int>> patch_origin;  // series, slice id
    int next_id = 0;

    for (const auto& header : volume_headers) {
        const Volume vol = read_mhd(header.string());
        const fs::path lung_header = data / "lungmasks" / header.filename();
        if (!fs::exists(lung_header))
            throw DataError("prep: missing lung mask " + lung_header.string() + " for " + header.string());
        const Volume lung_vol = read_mhd(lung_header.string());
        if (lung_vol.meta.dims != vol.meta.dims)
            throw DataError("prep: lung mask dims do not match volume for " + vol.meta.series);

        const int zs = vol.meta.dims[2];
        std::vector<bool> has_nodule(static_cast<std::size_t>(zs));
        std::vector<Tensor<float>> nod_masks(static_cast<std::size_t>(zs));
        for (int z = 0; z < zs; ++z) {
            nod_masks[static_cast<std::size_t>(z)] = nodule_mask_union(annotations, vol.meta, z);
            bool any = false;
            for (float v : nod_masks[static_cast<std::size_t>(z)].data()) any |= v != 0.0f;
            has_nodule[static_cast<std::size_t>(z)] = any;
        }

        // systematic sampling balances slice kinds; volumes with a single
        // kind keep every slice
        std::vector<int> kept;
        bool pos = false, neg = false;
        for (bool b : has_nodule) (b ? pos : neg) = true;
        if (pos && neg) {
            kept = systematic_sample(has_nodule);
        } else {
            kept.resize(static_cast<std::size_t>(zs));
            std::iota(kept.begin(), kept.end(), 0);
            std::cerr << "prep: " << vol.meta.series << " has only " << (pos ? "nodule-bearing" : "nodule-free")
                      << " slices; keeping all " << zs << "\n";
        }

        for (int z : kept) {
            Tensor<float> img = volume_slice(vol, z);
            if (vol.meta.element_type == MhdElementType::Int16) img = hu_window(img, cfg.hu_center, cfg.hu_width);
            const Tensor<float> lung = binarize(volume_slice(lung_vol, z), 0.5);
            const Tensor<float>& nod = nod_masks[static_cast<std::size_t>(z)];

            VolumeMeta m2;
            m2.dims = {img.dim(1), img.dim(0), 1};
            m2.spacing = {vol.meta.spacing[0], vol.meta.spacing[1], vol.meta.spacing[2]};
            m2.offset = {vol.meta.offset[0], vol.meta.offset[1], vol.meta.offset[2] + z * vol.meta.spacing[2]};
            m2.element_type = MhdElementType::Float32;
            const Shape flat{1, img.dim(0), img.dim(1)};
            write_mhd(m2, Tensor<float>::from_data(flat, {img.data().begin(), img.data().end()}),
                      (out / "slices" / (slice_stem(next_id, "img") + ".mhd")).string());
            m2.element_type = MhdElementType::Int16;
            write_mhd(m2, Tensor<float>::from_data(flat, {lung.data().begin(), lung.data().end()}),
                      (out / "slices" / (slice_stem(next_id, "lung") + ".mhd")).string());
            write_mhd(m2, Tensor<float>::from_data(flat, {nod.data().begin(), nod.data().end()}),
                      (out / "slices" / (slice_stem(next_id, "nod") + ".mhd")).string());

            for (auto& rec : extract_patches(img, lung, nod, cfg.stride, next_id)) {
                patch_origin.emplace_back(vol.meta.series, next_id);
                patches.push_back(std::move(rec));
            }
            index.push_back({next_id, vol.meta.series, z, has_nodule[static_cast<std::size_t>(z)]});
            ++next_id;
        }
    }

    if (cfg.balance) {
        // balance by index bookkeeping so patch origins stay aligned
        std::vector<std::size_t> c1, c2;
        for (std::size_t i = 0; i < patches.size(); ++i) (patches[i].label == PatchLabel::C1 ? c1 : c2).push_back(i);
        Rng rng(mix64(cfg.seed ^ hash64("patch-balance")));
        rng.shuffle(c1);
        rng.shuffle(c2);
        const std::size_t keep = std::min(c1.size(), c2.size());
        std::vector<std::size_t> kept(c1.begin(), c1.begin() + static_cast<std::ptrdiff_t>(keep));
        kept.insert(kept.end(), c2.begin(), c2.begin() + static_cast<std::ptrdiff_t>(keep));
        rng.shuffle(kept);
        std::vector<PatchRecord> bp;
        std::vector<std::pair<std::string, int>> bo;
        for (std::size_t i : kept) {
            bp.push_back(std::move(patches[i]));
            bo.push_back(patch_origin[i]);
        }
        patches = std::move(bp);
        patch_origin = std::move(bo);
    }

    write_index(index, (out / "index.csv").string());
    save_patches(patches, (out / "patches.pch").string());
    std::string meta_csv = "index,series,slice_id,label\n";
    for (std::size_t i = 0; i < patches.size(); ++i)
        meta_csv += std::to_string(i) + "," + patch_origin[i].first + "," + std::to_string(patch_origin[i].second) +
                    "," + (patches[i].label == PatchLabel::C1 ? "C1" : "C2") + "\n";
    atomic_write_file((out / "patches_meta.csv").string(), meta_csv);
    write_run_json(cfg);

    long c1 = 0;
    for (const auto& p : patches) c1 += p.label == PatchLabel::C1;
    std::cout << "prep: " << index.size() << " slices, " << patches.size() << " patches (" << c1 << " C1) to "
              << cfg.out_dir << "\n";
}

// prepared-slice loading; entries filtered to one kfold part
SegDataset load_slices(const fs::path& prep, const std::vector<SliceEntry>& entries,
                       const std::set<std::string>& series) {
    SegDataset out;
    for (const auto& e : entries) {
        if (!series.count(e.series)) continue;
        const Volume img = read_mhd((prep / "slices" / (slice_stem(e.id, "img") + ".mhd")).string());
        const Volume lung = read_mhd((prep / "slices" / (slice_stem(e.id, "lung") + ".mhd")).string());
        out.push_back({volume_slice(img, 0), binarize(volume_slice(lung, 0), 0.5)});
    }
    return out;
}

std::vector<std::string> index_series(const std::vector<SliceEntry>& entries) {
    std::set<std::string> s;
    for (const auto& e : entries) s.insert(e.series);
    return {s.begin(), s.end()};
}

KfoldSplit split_of(const RunConfig& cfg, const std::vector<SliceEntry>& entries) {
    return kfold_split(index_series(entries), cfg.folds, cfg.fold);
}

void cmd_train_seg(const RunConfig& cfg) {
    const fs::path prep(cfg.data_dir);
    const auto entries = read_index((prep / "index.csv").string());
    const auto split = split_of(cfg, entries);
    const SegDataset train = load_slices(prep, entries, {split.train.begin(), split.train.end()});
    const SegDataset val = load_slices(prep, entries, {split.val.begin(), split.val.end()});

    const Scale scale = parse_scale(cfg.scale);
    const auto seg_spec = build_segmenter(scale);
    const auto disc_spec = build_discriminator(scale);
    if (!train.empty() && train[0].image.shape() != Shape{seg_spec.input_shape[1], seg_spec.input_shape[2]})
        throw DataError("train-seg: slices are " + shape_string(train[0].image.shape()) + " but scale " + cfg.scale +
                        " expects " + std::to_string(seg_spec.input_shape[1]) + "x" +
                        std::to_string(seg_spec.input_shape[2]));

    const auto result = train_stage1(train, val, seg_spec, disc_spec, train_config(cfg));

    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);
    result.history.save((out / "history.csv").string());
    save_weights(result.segmenter, (out / "segmenter.wts").string());
    save_weights(result.discriminator, (out / "discriminator.wts").string());
    write_run_json(cfg);
    std::cout << "train-seg: " << result.history.rows.size() << " iterations, best val dice "
              << fmt(result.best_val_dice) << ", weights in " << cfg.out_dir << "\n";
}

struct SegEval {
    double dice_mean = 0, auc_mean = 0, hd_mean = 0;
    long n = 0, hd_defined = 0, auc_defined = 0;
    std::string per_slice_csv;
};

SegEval eval_segmenter(const NetworkSpec& seg_spec, WeightStore<float>& seg, const SegDataset& data,
                       bool postprocess) {
    SegEval ev;
    ev.per_slice_csv = "slice,dice,auc,hd\n";
    NoRecordScope<float> quiet;
    double dice_sum = 0, auc_sum = 0, hd_sum = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int h = data[i].image.dim(0), w = data[i].image.dim(1);
        Tensor<float> in(Shape{1, 1, h, w});
        std::copy_n(data[i].image.data().data(), static_cast<std::int64_t>(h) * w, in.data().data());
        Tensor<float> prob = forward(seg_spec, seg, in, Phase::Eval);
        Tensor<float> prob2d = Tensor<float>::from_data({h, w}, {prob.data().begin(), prob.data().end()});
        Tensor<float> pred = postprocess ? postprocess_mask(prob2d, 0.5) : binarize(prob2d, 0.5);

        const double d = dice(pred, data[i].mask);
        dice_sum += d;

        std::string auc_cell = "nan", hd_cell = "nan";
        bool pos = false, neg = false;
        for (float v : data[i].mask.data()) (v != 0.0f ? pos : neg) = true;
        if (pos && neg) {
            std::vector<double> scores(prob2d.data().begin(), prob2d.data().end());
            std::vector<int> labels(data[i].mask.data().size());
            for (std::size_t j = 0; j < labels.size(); ++j) labels[j] = data[i].mask.data()[j] != 0.0f;
            const double a = roc_auc(scores, labels);
            auc_sum += a;
            ++ev.auc_defined;
            auc_cell = fmt(a);
        }
        if (pos && !boundary_pixels(pred).empty()) {
            const double hd = hausdorff(pred, data[i].mask);
            hd_sum += hd;
            ++ev.hd_defined;
            hd_cell = fmt(hd);
        }
        ev.per_slice_csv += std::to_string(i) + "," + fmt(d) + "," + auc_cell + "," + hd_cell + "\n";
        ++ev.n;
    }
    ev.dice_mean = ev.n ? dice_sum / ev.n : 0;
    ev.auc_mean = ev.auc_defined ? auc_sum / ev.auc_defined : 0;
    ev.hd_mean = ev.hd_defined ? hd_sum / ev.hd_defined : 0;
    return ev;
}

void cmd_eval_seg(const RunConfig& cfg) {
    const fs::path prep(cfg.data_dir);
    const auto entries = read_index((prep / "index.csv").string());
    const auto split = split_of(cfg, entries);
    const SegDataset test = load_slices(prep, entries, {split.test.begin(), split.test.end()});
    if (test.empty()) throw DataError("eval-seg: empty test split");

    const auto seg_spec = build_segmenter(parse_scale(cfg.scale));
    auto seg = load_weights<float>(cfg.weights);
    check_weights(seg_spec, seg);

    const SegEval ev = eval_segmenter(seg_spec, seg, test, false);
    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);
    atomic_write_file((out / "per_slice.csv").string(), ev.per_slice_csv);
    std::string summary;
    summary += "slices: " + std::to_string(ev.n) + "\n";
    summary += "dice_mean: " + fmt(ev.dice_mean) + "\n";
    summary += "auc_mean: " + fmt(ev.auc_mean) + " (" + std::to_string(ev.auc_defined) + " defined)\n";
    summary += "hd_mean_px: " + fmt(ev.hd_mean) + " (" + std::to_string(ev.hd_defined) + " defined)\n";
    atomic_write_file((out / "summary.txt").string(), summary);
    write_run_json(cfg);
    std::cout << summary;
}

std::vector<std::string> read_patch_series(const std::string& path, std::size_t expected) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("index,series,slice_id,label", 0) != 0)
        throw DataError("bad patches_meta header in " + path);
    std::vector<std::string> series;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string idx, s;
        std::getline(ls, idx, ',');
        std::getline(ls, s, ',');
        series.push_back(s);
    }
    if (series.size() != expected)
        throw DataError("patches_meta rows (" + std::to_string(series.size()) + ") do not match patch count (" +
                        std::to_string(expected) + ")");
    return series;
}

void split_patches(const RunConfig& cfg, const fs::path& prep, std::vector<PatchRecord>& train,
                   std::vector<PatchRecord>& val, std::vector<PatchRecord>& test) {
    auto patches = load_patches((prep / "patches.pch").string());
    const auto series = read_patch_series((prep / "patches_meta.csv").string(), patches.size());
    std::set<std::string> unique(series.begin(), series.end());
    const auto split = kfold_split({unique.begin(), unique.end()}, cfg.folds, cfg.fold);
    const std::set<std::string> val_set(split.val.begin(), split.val.end());
    const std::set<std::string> test_set(split.test.begin(), split.test.end());
    for (std::size_t i = 0; i < patches.size(); ++i) {
        if (val_set.count(series[i]))
            val.push_back(std::move(patches[i]));
        else if (test_set.count(series[i]))
            test.push_back(std::move(patches[i]));
        else
            train.push_back(std::move(patches[i]));
    }
}

void cmd_train_clf(const RunConfig& cfg) {
    std::vector<PatchRecord> train, val, test;
    split_patches(cfg, cfg.data_dir, train, val, test);

    const auto clf_spec = build_classifier();
    TrainConfig tc = train_config(cfg);
    if (tc.batch_size < 16) tc.batch_size = 32;  // stage-2 default batch
    const auto result = train_stage2(train, val, clf_spec, tc);

    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);
    atomic_write_file((out / "history.csv").string(), stage2_history_csv(result.history));
    save_weights(result.classifier, (out / "classifier.wts").string());
    write_run_json(cfg);
    std::cout << "train-clf: " << train.size() << " train / " << val.size() << " val patches, best val accuracy "
              << fmt(result.best_val_accuracy) << ", weights in " << cfg.out_dir << "\n";
}

ClassificationReport patch_eval(const NetworkSpec& clf_spec, WeightStore<float>& clf,
                                const std::vector<PatchRecord>& patches, int batch) {
    const auto cls = classify_patches(clf_spec, clf, patches, batch);
    std::vector<int> preds(cls.size()), labels(cls.size());
    for (std::size_t i = 0; i < cls.size(); ++i) {
        preds[i] = cls[i] == 0 ? 1 : 0;
        labels[i] = patches[i].label == PatchLabel::C1 ? 1 : 0;
    }
    return classification_report(preds, labels);
}

std::string report_text(const ClassificationReport& r) {
    std::string s;
    s += "samples: " + std::to_string(r.total()) + "\n";
    s += "confusion: TP " + std::to_string(r.tp) + "  FP " + std::to_string(r.fp) + "  TN " + std::to_string(r.tn) +
         "  FN " + std::to_string(r.fn) + "\n";
    s += "accuracy: " + fmt(r.accuracy()) + "\n";
    s += "sensitivity: " + fmt(r.sensitivity()) + "\n";
    s += "specificity: " + fmt(r.specificity()) + "\n";
    return s;
}

void cmd_eval_clf(const RunConfig& cfg) {
    std::vector<PatchRecord> train, val, test;
    split_patches(cfg, cfg.data_dir, train, val, test);
    if (test.empty()) throw DataError("eval-clf: empty test split");

    const auto clf_spec = build_classifier();
    auto clf = load_weights<float>(cfg.weights);
    check_weights(clf_spec, clf);

    const auto rep = patch_eval(clf_spec, clf, test, std::max(cfg.batch_size, 32));
    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);
    atomic_write_file((out / "report.txt").string(), report_text(rep));
    atomic_write_file((out / "metrics.csv").string(),
                      "metric,value\naccuracy," + fmt(rep.accuracy()) + "\nsensitivity," + fmt(rep.sensitivity()) +
                          "\nspecificity," + fmt(rep.specificity()) + "\ntp," + std::to_string(rep.tp) + "\nfp," +
                          std::to_string(rep.fp) + "\ntn," + std::to_string(rep.tn) + "\nfn," +
                          std::to_string(rep.fn) + "\n");
    write_run_json(cfg);
    std::cout << report_text(rep);
}

void cmd_saliency(const RunConfig& cfg) {
    const fs::path prep(cfg.data_dir);
    const auto patches = load_patches((prep / "patches.pch").string());
    if (patches.empty()) throw DataError("saliency: no patches in " + cfg.data_dir);

    const auto clf_spec = build_classifier();
    auto clf = load_weights<float>(cfg.weights);
    check_weights(clf_spec, clf);
    const ScoreModel model = classifier_model(clf_spec, clf);

    std::vector<std::size_t> targets;
    if (cfg.index >= 0) {
        if (cfg.index >= static_cast<int>(patches.size()))
            throw std::invalid_argument("saliency: --index " + std::to_string(cfg.index) + " out of range (" +
                                        std::to_string(patches.size()) + " patches)");
        targets.push_back(static_cast<std::size_t>(cfg.index));
    } else {
        for (std::size_t i = 0; i < patches.size() && static_cast<int>(targets.size()) < cfg.saliency_count; ++i)
            if (patches[i].label == PatchLabel::C1) targets.push_back(i);
        if (targets.empty()) throw DataError("saliency: no C1 patches to explain");
    }

    RiseConfig rc;
    rc.mask_count = cfg.rise_masks;
    rc.grid = cfg.rise_grid;
    rc.keep_probability = cfg.rise_keep;
    rc.seed = cfg.seed;

    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);
    for (std::size_t t : targets) {
        const Tensor<float> map = rise_saliency(model, patches[t].pixels, rc);
        float lo = map.data()[0], hi = map.data()[0];
        for (float v : map.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        char stem[32];
        std::snprintf(stem, sizeof(stem), "saliency_%05d", static_cast<int>(t));
        write_pgm(map, (out / (std::string(stem) + ".pgm")).string(), lo, hi > lo ? hi : lo + 1e-6);
        write_saliency_csv(map, (out / (std::string(stem) + ".csv")).string());
        std::snprintf(stem, sizeof(stem), "patch_%05d", static_cast<int>(t));
        write_pgm(patches[t].pixels, (out / (std::string(stem) + ".pgm")).string());
    }
    write_run_json(cfg);
    std::cout << "saliency: wrote " << targets.size() << " map(s) to " << cfg.out_dir << "\n";
}

NetworkSpec cost_network(const RunConfig& cfg) {
    NetworkSpec spec;
    if (cfg.net == "segmenter")
        spec = build_segmenter(parse_scale(cfg.scale));
    else if (cfg.net == "discriminator")
        spec = build_discriminator(parse_scale(cfg.scale));
    else if (cfg.net == "classifier")
        spec = build_classifier();
    else if (cfg.net == "vgg16")
        spec = build_vgg16_conv_stack();
    else
        throw std::invalid_argument("cost: unknown net " + cfg.net +
                                    " (expected segmenter|discriminator|classifier|vgg16)");
    if (!cfg.input_size.empty()) {
        const auto x = cfg.input_size.find('x');
        if (x == std::string::npos)
            throw std::invalid_argument("cost: --input-size expects HxW, got " + cfg.input_size);
        spec.input_shape[1] = std::stoi(cfg.input_size.substr(0, x));
        spec.input_shape[2] = std::stoi(cfg.input_size.substr(x + 1));
        infer_shapes(spec);  // re-validate pooling parity etc. for the new size
    }
    return spec;
}

void cmd_cost(const RunConfig& cfg) {
    const auto spec = cost_network(cfg);
    const auto report = analyze_cost(spec, cfg.macs_only);
    const std::string table = render_cost_table(report);
    std::cout << (cfg.csv ? render_cost_csv(report) : table);
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        atomic_write_file((fs::path(cfg.out_dir) / "report.txt").string(), table);
        atomic_write_file((fs::path(cfg.out_dir) / "report.csv").string(), render_cost_csv(report));
        write_run_json(cfg);
    }
}

// the end-to-end flow on phantoms: generate, prep, stage 1, stage 2,
// evaluation, then per-slice verdicts through segment -> postprocess ->
// patches -> classify
void cmd_pipeline(const RunConfig& cfg) {
    if (parse_scale(cfg.scale) != Scale::Tiny)
        throw std::invalid_argument("pipeline: only --scale tiny is desk-sized; train full scale via train-seg");
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);

    RunConfig gen = cfg;
    gen.out_dir = (out / "data").string();
    cmd_gen_data(gen);

    RunConfig prep = cfg;
    prep.data_dir = gen.out_dir;
    prep.out_dir = (out / "prep").string();
    cmd_prep(prep);

    RunConfig seg = cfg;
    seg.data_dir = prep.out_dir;
    seg.out_dir = (out / "seg").string();
    cmd_train_seg(seg);

    RunConfig clf = cfg;
    clf.data_dir = prep.out_dir;
    clf.out_dir = (out / "clf").string();
    cmd_train_clf(clf);

    // evaluation on the held-out test fold
    const auto entries = read_index((fs::path(prep.out_dir) / "index.csv").string());
    const auto split = split_of(cfg, entries);
    const std::set<std::string> test_series(split.test.begin(), split.test.end());
    const SegDataset test = load_slices(prep.out_dir, entries, test_series);
    if (test.empty()) throw DataError("pipeline: empty test split");

    const auto seg_spec = build_segmenter(Scale::Tiny);
    auto seg_w = load_weights<float>((fs::path(seg.out_dir) / "segmenter.wts").string());
    const auto clf_spec = build_classifier();
    auto clf_w = load_weights<float>((fs::path(clf.out_dir) / "classifier.wts").string());

    const SegEval ev = eval_segmenter(seg_spec, seg_w, test, false);

    std::vector<PatchRecord> tr, va, te;
    split_patches(cfg, prep.out_dir, tr, va, te);
    ClassificationReport patch_rep;
    if (!te.empty()) patch_rep = patch_eval(clf_spec, clf_w, te, 32);

    // per-slice verdict: a slice is flagged iff >= 1 patch classifies as C1
    std::vector<int> verdicts, truths;
    {
        NoRecordScope<float> quiet;
        std::size_t slice_idx = 0;
        for (const auto& e : entries) {
            if (!test_series.count(e.series)) continue;
            const SegSample& s = test[slice_idx];
            const int h = s.image.dim(0), w = s.image.dim(1);
            Tensor<float> in(Shape{1, 1, h, w});
            std::copy_n(s.image.data().data(), static_cast<std::int64_t>(h) * w, in.data().data());
            Tensor<float> prob = forward(seg_spec, seg_w, in, Phase::Eval);
            const Tensor<float> lung =
                postprocess_mask(Tensor<float>::from_data({h, w}, {prob.data().begin(), prob.data().end()}), 0.5);
            const auto patches = extract_patches(s.image, lung, Tensor<float>(Shape{h, w}), cfg.stride, e.id);
            int flagged = 0;
            if (!patches.empty()) {
                const auto cls = classify_patches(clf_spec, clf_w, patches, 32);
                for (int c : cls) flagged += c == 0;  // class index 0 = C1
            }
            verdicts.push_back(flagged > 0 ? 1 : 0);
            truths.push_back(e.has_nodule ? 1 : 0);
            ++slice_idx;
        }
    }

    std::string metrics = "metric,value\n";
    metrics += "seg_dice_mean," + fmt(ev.dice_mean) + "\n";
    metrics += "seg_auc_mean," + fmt(ev.auc_mean) + "\n";
    metrics += "seg_hd_mean_px," + fmt(ev.hd_mean) + "\n";
    if (!te.empty()) {
        metrics += "patch_accuracy," + fmt(patch_rep.accuracy()) + "\n";
        metrics += "patch_sensitivity," + fmt(patch_rep.sensitivity()) + "\n";
        metrics += "patch_specificity," + fmt(patch_rep.specificity()) + "\n";
    }
    bool vpos = false, vneg = false;
    for (int t : truths) (t ? vpos : vneg) = true;
    if (vpos && vneg) {
        const auto vrep = classification_report(verdicts, truths);
        metrics += "slice_verdict_accuracy," + fmt(vrep.accuracy()) + "\n";
        metrics += "slice_verdict_sensitivity," + fmt(vrep.sensitivity()) + "\n";
        metrics += "slice_verdict_specificity," + fmt(vrep.specificity()) + "\n";
    } else {
        long hits = 0;
        for (std::size_t i = 0; i < verdicts.size(); ++i) hits += verdicts[i] == truths[i];
        metrics += "slice_verdict_accuracy," +
                   fmt(verdicts.empty() ? 0.0 : static_cast<double>(hits) / verdicts.size()) + "\n";
    }
    atomic_write_file((out / "metrics.csv").string(), metrics);
    write_run_json(cfg);
    std::cout << "pipeline: done\n" << metrics;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nodnet: adversarially trained lung segmentation, nodule patch classification, RISE saliency, "
                 "and static cost analysis on phantoms or MetaImage CT volumes"};
    app.require_subcommand(1);

    RunConfig cfg;
    if (const char* root = std::getenv("NODNET_OUT_ROOT")) cfg.out_dir = std::string(root) + "/out";

    // --config is applied before flag parsing so explicit flags win
    std::string config_path;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
    try {
        if (!config_path.empty()) from_json_file(config_path, cfg);
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file; flags override its values");
        sub->add_option("--seed", cfg.seed, "master seed");
        sub->add_flag("--deterministic", cfg.deterministic,
                      "record deterministic mode (execution is always single-threaded and seed-reproducible)");
        sub->add_option("--out", cfg.out_dir, "output directory");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    add_common(gen);
    gen->add_option("--count", cfg.count, "number of phantom volumes");
    gen->add_option("--size", cfg.size, "slice side in pixels");
    gen->add_option("--slices", cfg.slices, "slices per volume");
    gen->add_option("--wall-attach", cfg.wall_attach_probability, "wall-attachment probability");
    gen->add_option("--noise", cfg.noise_amplitude, "additive noise amplitude");

    auto* prep = app.add_subcommand("prep", "window, sample and patch a volume dataset");
    add_common(prep);
    prep->add_option("--data", cfg.data_dir, "dataset directory (volumes/, lungmasks/, annotations.csv)")->required();
    prep->add_option("--stride", cfg.stride, "patch grid stride");
    prep->add_flag("--balance,!--no-balance", cfg.balance, "subsample the majority patch class");
    prep->add_option("--hu-center", cfg.hu_center, "HU window center for int16 volumes");
    prep->add_option("--hu-width", cfg.hu_width, "HU window width for int16 volumes");

    auto* tseg = app.add_subcommand("train-seg", "stage 1: adversarial segmenter training");
    add_common(tseg);
    tseg->add_option("--data", cfg.data_dir, "prepared dataset directory")->required();
    tseg->add_option("--scale", cfg.scale, "tiny or full");
    tseg->add_option("--alpha", cfg.alpha, "adversarial loss scale");
    tseg->add_option("--lr", cfg.learning_rate, "learning rate");
    tseg->add_option("--epochs", cfg.epochs_stage1, "epoch budget");
    tseg->add_option("--iters", cfg.max_iterations, "iteration cap (0 = epochs only)");
    tseg->add_option("--batch", cfg.batch_size, "batch size");
    tseg->add_option("--folds", cfg.folds, "cross-validation parts");
    tseg->add_option("--fold", cfg.fold, "fold index");

    auto* tclf = app.add_subcommand("train-clf", "stage 2: patch classifier training");
    add_common(tclf);
    tclf->add_option("--data", cfg.data_dir, "prepared dataset directory")->required();
    tclf->add_option("--lr", cfg.learning_rate, "learning rate");
    tclf->add_option("--epochs", cfg.epochs_stage2, "epoch budget");
    tclf->add_option("--batch", cfg.batch_size, "batch size");
    tclf->add_option("--folds", cfg.folds, "cross-validation parts");
    tclf->add_option("--fold", cfg.fold, "fold index");

    auto* eseg = app.add_subcommand("eval-seg", "segmentation metrics on the test fold");
    add_common(eseg);
    eseg->add_option("--data", cfg.data_dir, "prepared dataset directory")->required();
    eseg->add_option("--weights", cfg.weights, "segmenter .wts file")->required();
    eseg->add_option("--scale", cfg.scale, "tiny or full");
    eseg->add_option("--batch", cfg.batch_size, "batch size");
    eseg->add_option("--folds", cfg.folds, "cross-validation parts");
    eseg->add_option("--fold", cfg.fold, "fold index");

    auto* eclf = app.add_subcommand("eval-clf", "classification metrics on the test fold");
    add_common(eclf);
    eclf->add_option("--data", cfg.data_dir, "prepared dataset directory")->required();
    eclf->add_option("--weights", cfg.weights, "classifier .wts file")->required();
    eclf->add_option("--batch", cfg.batch_size, "batch size");
    eclf->add_option("--folds", cfg.folds, "cross-validation parts");
    eclf->add_option("--fold", cfg.fold, "fold index");

    auto* sal = app.add_subcommand("saliency", "RISE saliency maps for classifier decisions");
    add_common(sal);
    sal->add_option("--data", cfg.data_dir, "prepared dataset directory")->required();
    sal->add_option("--weights", cfg.weights, "classifier .wts file")->required();
    sal->add_option("--index", cfg.index, "explain one patch by index");
    sal->add_option("--count", cfg.saliency_count, "explain the first N C1 patches");
    sal->add_option("--masks", cfg.rise_masks, "number of random masks");
    sal->add_option("--grid", cfg.rise_grid, "low-res mask grid side");
    sal->add_option("--p1", cfg.rise_keep, "mask keep probability");

    auto* cost = app.add_subcommand("cost", "static parameter/FLOP analysis of a network");
    add_common(cost);
    cost->add_option("--net", cfg.net, "segmenter|discriminator|classifier|vgg16");
    cost->add_option("--scale", cfg.scale, "tiny or full");
    cost->add_option("--input-size", cfg.input_size, "override the spatial input, HxW");
    cost->add_flag("--macs-only", cfg.macs_only, "report MACs in the FLOPs column");
    cost->add_flag("--csv", cfg.csv, "print CSV instead of the table");

    auto* pipe = app.add_subcommand("pipeline", "generate, train both stages, evaluate, per-slice verdicts");
    add_common(pipe);
    bool phantom_flag = false, tiny_flag = false;
    pipe->add_flag("--phantom", phantom_flag, "use phantom data (the only source the pipeline supports)");
    pipe->add_flag("--tiny", tiny_flag, "tiny-scale networks (default)");
    pipe->add_option("--count", cfg.count, "number of phantom volumes");
    pipe->add_option("--size", cfg.size, "slice side in pixels");
    pipe->add_option("--slices", cfg.slices, "slices per volume");
    pipe->add_option("--alpha", cfg.alpha, "adversarial loss scale");
    pipe->add_option("--lr", cfg.learning_rate, "learning rate");
    pipe->add_option("--epochs", cfg.epochs_stage1, "stage-1 epoch budget");
    pipe->add_option("--epochs-clf", cfg.epochs_stage2, "stage-2 epoch budget");
    pipe->add_option("--iters", cfg.max_iterations, "stage-1 iteration cap");
    pipe->add_option("--batch", cfg.batch_size, "batch size");
    pipe->add_option("--stride", cfg.stride, "patch grid stride");
    pipe->add_option("--folds", cfg.folds, "cross-validation parts");
    pipe->add_option("--fold", cfg.fold, "fold index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints message and usage
        return code == 0 ? 0 : 1;      // --help exits 0; any parse failure is a usage error
    }
    if (tiny_flag) cfg.scale = "tiny";

    cfg.subcommand = app.get_subcommands().front()->get_name();
    if (cfg.out_dir.empty() && cfg.subcommand != "cost") {
        std::cerr << "error: --out is required (or set NODNET_OUT_ROOT)\n";
        return 1;
    }

    try {
        if (cfg.subcommand == "gen-data")
            cmd_gen_data(cfg);
        else if (cfg.subcommand == "prep")
            cmd_prep(cfg);
        else if (cfg.subcommand == "train-seg")
            cmd_train_seg(cfg);
        else if (cfg.subcommand == "train-clf")
            cmd_train_clf(cfg);
        else if (cfg.subcommand == "eval-seg")
            cmd_eval_seg(cfg);
        else if (cfg.subcommand == "eval-clf")
            cmd_eval_clf(cfg);
        else if (cfg.subcommand == "saliency")
            cmd_saliency(cfg);
        else if (cfg.subcommand == "cost")
            cmd_cost(cfg);
        else if (cfg.subcommand == "pipeline")
            cmd_pipeline(cfg);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
