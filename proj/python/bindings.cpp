// Python bindings for the main pipeline operations: phantom generation,
// TSV3 I/O, normalization, quantization, metrics, training and inference.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <stdexcept>

#include "tokenseg/config.hpp"
#include "tokenseg/dataset.hpp"
#include "tokenseg/model.hpp"
#include "tokenseg/objective.hpp"
#include "tokenseg/tokenizer.hpp"
#include "tokenseg/trainer.hpp"
#include "tokenseg/volume.hpp"

namespace py = pybind11;
using namespace tokenseg;

namespace {

Volume3D volume_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 3) throw std::invalid_argument("volume must be a 3-d array");
    Volume3D v;
    v.dims = {std::uint32_t(arr.shape(0)), std::uint32_t(arr.shape(1)),
              std::uint32_t(arr.shape(2))};
    v.voxels.resize(v.dims.count());
    std::memcpy(v.voxels.data(), arr.data(), v.voxels.size() * sizeof(float));
    return v;
}

MaskVolume mask_from_array(py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 3) throw std::invalid_argument("mask must be a 3-d array");
    MaskVolume m;
    m.dims = {std::uint32_t(arr.shape(0)), std::uint32_t(arr.shape(1)),
              std::uint32_t(arr.shape(2))};
    m.labels.resize(m.dims.count());
    std::memcpy(m.labels.data(), arr.data(), m.labels.size());
    return m;
}

py::array_t<float> volume_to_array(const Volume3D& v) {
    py::array_t<float> arr({py::ssize_t(v.dims.d), py::ssize_t(v.dims.h),
                            py::ssize_t(v.dims.w)});
    std::memcpy(arr.mutable_data(), v.voxels.data(), v.voxels.size() * sizeof(float));
    return arr;
}

py::array_t<std::uint8_t> mask_to_array(const MaskVolume& m) {
    py::array_t<std::uint8_t> arr({py::ssize_t(m.dims.d), py::ssize_t(m.dims.h),
                                   py::ssize_t(m.dims.w)});
    std::memcpy(arr.mutable_data(), m.labels.data(), m.labels.size());
    return arr;
}

std::vector<Case> cases_from_pairs(const py::list& pairs) {
    std::vector<Case> out;
    for (const auto& item : pairs) {
        auto pair = item.cast<py::tuple>();
        if (pair.size() != 2)
            throw std::invalid_argument("each case must be a (volume, mask) pair");
        out.push_back({volume_from_array(pair[0].cast<py::array_t<float>>()),
                       mask_from_array(pair[1].cast<py::array_t<std::uint8_t>>())});
    }
    if (out.empty()) throw std::invalid_argument("dataset is empty");
    return out;
}

py::dict report_to_dict(const MetricsReport& r) {
    py::dict d;
    auto put = [&](const char* key, const std::optional<double>& v) {
        if (v) d[key] = *v;
        else d[key] = py::none();
    };
    put("dice", r.dice);
    put("iou", r.iou);
    put("hd95", r.hd95);
    put("sensitivity", r.sensitivity);
    put("precision", r.precision);
    put("boundary_token_ratio", r.boundary_token_ratio);
    d["codebook_utilization"] = r.codebook_utilization;
    d["compression_ratio"] = r.compression_ratio;
    return d;
}

TrainConfig config_from_text(const std::string& text) {
    TrainConfig cfg = config_from_kv(KvConfig::parse(text));
    cfg.validate();
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_tokenseg, m) {
    m.doc() = "Sparse-token volumetric segmentation pipeline";

    m.def("generate_phantom",
          [](std::tuple<int, int, int> dims, std::uint64_t seed) {
              Dims d{std::uint32_t(std::get<0>(dims)), std::uint32_t(std::get<1>(dims)),
                     std::uint32_t(std::get<2>(dims))};
              auto specs = make_phantom_specs(1, d, seed);
              Phantom ph = generate_phantom(specs[0]);
              return py::make_tuple(volume_to_array(ph.volume), mask_to_array(ph.mask));
          },
          py::arg("dims"), py::arg("seed"),
          "Seeded synthetic blob phantom; returns (volume f32, mask u8) arrays.");

    m.def("normalize",
          [](py::array_t<float> vol) {
              auto res = normalize_intensity(volume_from_array(vol));
              return volume_to_array(res.volume);
          },
          py::arg("volume"), "Min-max intensity normalization to [0, 1].");

    m.def("save_volume",
          [](py::array_t<float> vol, const std::string& path) {
              save_volume(volume_from_array(vol), path);
          },
          py::arg("volume"), py::arg("path"));
    m.def("load_volume",
          [](const std::string& path) { return volume_to_array(load_volume(path)); },
          py::arg("path"));
    m.def("save_mask",
          [](py::array_t<std::uint8_t> mask, const std::string& path) {
              save_mask(mask_from_array(mask), path);
          },
          py::arg("mask"), py::arg("path"));
    m.def("load_mask",
          [](const std::string& path) { return mask_to_array(load_mask(path)); },
          py::arg("path"));

    m.def("quantize",
          [](py::array_t<double, py::array::c_style | py::array::forcecast> tokens,
             py::array_t<double, py::array::c_style | py::array::forcecast> codebook) {
              if (tokens.ndim() != 2 || codebook.ndim() != 2)
                  throw std::invalid_argument("tokens (C,N) and codebook (M,C) must be 2-d");
              int width = int(tokens.shape(0)), n = int(tokens.shape(1));
              int m_ = int(codebook.shape(0));
              if (int(codebook.shape(1)) != width)
                  throw std::invalid_argument("codebook width mismatch");
              std::span<const double> ts(tokens.data(), std::size_t(width) * n);
              std::span<const double> cs(codebook.data(), std::size_t(m_) * width);
              QuantizedPool q = quantize(ts, width, n, cs, m_);
              return py::array_t<int>(py::ssize_t(n), q.codes.data());
          },
          py::arg("tokens"), py::arg("codebook"),
          "Nearest-prototype codes, ties to the lowest index.");

    m.def("dice", [](py::array_t<std::uint8_t> a, py::array_t<std::uint8_t> b) {
        auto v = dice_score(mask_from_array(a), mask_from_array(b));
        return v ? py::cast(*v) : py::none().cast<py::object>();
    });
    m.def("iou", [](py::array_t<std::uint8_t> a, py::array_t<std::uint8_t> b) {
        auto v = iou(mask_from_array(a), mask_from_array(b));
        return v ? py::cast(*v) : py::none().cast<py::object>();
    });
    m.def("hd95",
          [](py::array_t<std::uint8_t> a, py::array_t<std::uint8_t> b,
             std::tuple<float, float, float> spacing) {
              std::array<float, 3> sp{std::get<0>(spacing), std::get<1>(spacing),
                                      std::get<2>(spacing)};
              auto v = hd95(mask_from_array(a), mask_from_array(b), sp);
              return v ? py::cast(*v) : py::none().cast<py::object>();
          },
          py::arg("a"), py::arg("b"),
          py::arg("spacing") = std::tuple<float, float, float>(1.f, 1.f, 1.f));

    m.def("default_config",
          []() { return config_to_kv(TrainConfig{}).to_text(); },
          "Default configuration as flat key = value text.");

    m.def("train",
          [](const py::list& cases, const std::string& config_text,
             const std::string& checkpoint_path) {
              TrainConfig cfg = config_from_text(config_text);
              auto data = cases_from_pairs(cases);
              Model model;
              model.init(cfg.model);
              TrainResult res = train(model, cfg, data, data, nullptr);
              restore_snapshot(model, res.best_values);
              if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model, cfg);
              py::dict out;
              out["best_epoch"] = res.best_epoch;
              out["best_dice"] = res.best_dice;
              out["epochs_run"] = res.log.size();
              out["aborted_non_finite"] = res.aborted_non_finite;
              return out;
          },
          py::arg("cases"), py::arg("config"), py::arg("checkpoint_path") = "",
          "Train on (volume, mask) pairs; returns summary, optionally saves a checkpoint.");

    m.def("infer",
          [](const std::string& checkpoint_path, py::array_t<float> vol,
             py::object theta) {
              LoadedCheckpoint lc = load_checkpoint(checkpoint_path);
              Volume3D v = volume_from_array(vol);
              double th = theta.is_none() ? lc.cfg.model.theta : theta.cast<double>();
              Graph g;
              ForwardResult fr = forward(g, lc.model, v, nullptr, lc.cfg.seed);
              Volume3D prob = probability_volume(g, fr.prob, v);
              MaskVolume mask = binarize(prob, th);
              return mask_to_array(mask);
          },
          py::arg("checkpoint_path"), py::arg("volume"), py::arg("theta") = py::none(),
          "Segment one volume with a trained checkpoint.");

    m.def("evaluate",
          [](const std::string& checkpoint_path, const py::list& cases) {
              LoadedCheckpoint lc = load_checkpoint(checkpoint_path);
              auto data = cases_from_pairs(cases);
              EvalOutcome ev = evaluate(lc.model, data, lc.cfg.model.theta);
              py::dict out;
              out["aggregate"] = report_to_dict(ev.aggregate);
              py::list per_case;
              for (const auto& r : ev.per_case) per_case.append(report_to_dict(r));
              out["per_case"] = per_case;
              return out;
          },
          py::arg("checkpoint_path"), py::arg("cases"),
          "Per-case and aggregate metrics for a labeled dataset.");
}
