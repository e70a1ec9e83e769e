#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "symseg/config.hpp"
#include "symseg/data.hpp"
#include "symseg/elcore.hpp"
#include "symseg/errors.hpp"
#include "symseg/interpret.hpp"
#include "symseg/metrics.hpp"
#include "symseg/symfuse.hpp"

namespace py = pybind11;
using namespace symseg;

namespace {

Tensor tensor_from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    Shape shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(a.shape(i));
    std::vector<float> data(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(data));
}

py::array_t<float> numpy_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
    return out;
}

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Symbolic semantic segmentation core (emergent-language symbol channel)";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

    m.def("gumbel_softmax_sample", &el::gumbel_softmax_sample, py::arg("probabilities"),
          py::arg("noise"), py::arg("temperature"),
          "Relaxed categorical sample: exp((log p + g)/tau), normalized.");
    m.def("gumbel_softmax_from_logits", &el::gumbel_softmax_from_logits, py::arg("logits"),
          py::arg("noise"), py::arg("temperature"));

    m.def(
        "dice",
        [](const FloatArray& pred, const FloatArray& target, double thr) {
            return metrics::dice(tensor_from_numpy(pred), tensor_from_numpy(target), thr);
        },
        py::arg("pred"), py::arg("target"), py::arg("threshold") = 0.5);
    m.def(
        "mae",
        [](const FloatArray& pred, const FloatArray& target) {
            return metrics::mae(tensor_from_numpy(pred), tensor_from_numpy(target));
        },
        py::arg("pred"), py::arg("target"));
    m.def(
        "s_measure",
        [](const FloatArray& pred, const FloatArray& target, double alpha) {
            return metrics::s_measure(tensor_from_numpy(pred), tensor_from_numpy(target), alpha);
        },
        py::arg("pred"), py::arg("target"), py::arg("alpha") = 0.5);

    m.def(
        "generate_phantoms",
        [](int count, int size, uint64_t seed) {
            Rng rng(seed);
            auto samples = data::generate_phantoms(count, size, rng);
            py::list out;
            for (const auto& s : samples) {
                py::dict d;
                d["image"] = numpy_from_tensor(s.image);
                d["mask"] = numpy_from_tensor(s.mask);
                d["covid_present"] = s.covid_present;
                d["infection_area"] = s.infection_area;
                d["volume_id"] = s.volume_id;
                out.append(d);
            }
            return out;
        },
        py::arg("count"), py::arg("size") = 128, py::arg("seed") = 0,
        "Synthetic lung phantoms with ground-truth infection masks.");

    m.def(
        "fit_presence",
        [](const std::vector<std::pair<int, bool>>& rows, int vocab_size, double ridge,
           int min_count) {
            std::vector<interpret::PresenceRow> r;
            for (const auto& [s, p] : rows) r.push_back({s, p});
            return interpret::fit_presence(r, vocab_size, {ridge, min_count});
        },
        py::arg("rows"), py::arg("vocab_size"), py::arg("ridge") = 1e-3,
        py::arg("min_count") = 2,
        "McFadden pseudo-R^2 of a logistic fit of presence on one-hot symbols.");
    m.def(
        "fit_area",
        [](const std::vector<std::pair<int, double>>& rows, int vocab_size, double ridge,
           int min_count) {
            std::vector<interpret::AreaRow> r;
            for (const auto& [s, a] : rows) r.push_back({s, a});
            return interpret::fit_area(r, vocab_size, {ridge, min_count});
        },
        py::arg("rows"), py::arg("vocab_size"), py::arg("ridge") = 1e-3,
        py::arg("min_count") = 2,
        "Squared Pearson correlation of a least-squares area fit on one-hot symbols.");

    py::class_<fuse::LossReport>(m, "LossReport")
        .def_readonly("total", &fuse::LossReport::total)
        .def_readonly("bce_term", &fuse::LossReport::bce_term)
        .def_readonly("dice_term", &fuse::LossReport::dice_term);
    m.def(
        "compute_loss",
        [](const FloatArray& pred, const FloatArray& target) {
            return fuse::compute_loss(tensor_from_numpy(pred), tensor_from_numpy(target));
        },
        py::arg("pred"), py::arg("target"), "BCE + soft-Dice training loss.");

    py::class_<fuse::SymSegModel>(m, "SymSegModel")
        .def(py::init([](const std::string& config_json) {
                 SymSegConfig cfg = config_from_json(nlohmann::json::parse(config_json));
                 Rng rng(cfg.seed);
                 return std::make_unique<fuse::SymSegModel>(cfg, rng);
             }),
             py::arg("config_json"))
        .def_static("from_checkpoint", &fuse::model_from_checkpoint, py::arg("path"))
        .def("parameter_count", &fuse::SymSegModel::parameter_count)
        .def(
            "predict",
            [](const fuse::SymSegModel& model, const FloatArray& image) {
                Tensor img = tensor_from_numpy(image);
                if (img.rank() == 2) img = img.reshaped({1, 1, img.dim(0), img.dim(1)});
                ag::NoGradGuard ng;
                auto res = model.forward(ag::constant(std::move(img)), el::Mode::kInference);
                py::dict out;
                out["mask"] = numpy_from_tensor(
                    res.mask->value.reshaped({res.mask->value.dim(2), res.mask->value.dim(3)}));
                out["sentence"] =
                    res.sentences.empty() ? std::vector<int>{} : res.sentences[0].symbols;
                return out;
            },
            py::arg("image"), "Inference on a single [H,W] image.");

    m.def(
        "train_on_phantoms",
        [](const std::string& config_json, int count, const std::string& out_dir) {
            SymSegConfig cfg = config_from_json(nlohmann::json::parse(config_json));
            Rng drng(cfg.seed);
            auto samples = data::generate_phantoms(count, cfg.data.size, drng);
            auto ds = data::SliceDataset::from_memory(
                std::move(samples), data::SplitSpec{cfg.data.splits.train, cfg.data.splits.val,
                                                    cfg.data.splits.test, cfg.data.split_seed});
            Rng mrng(cfg.seed);
            fuse::SymSegModel model(cfg, mrng);
            fuse::TrainResult res = fuse::train(model, ds, cfg, out_dir);
            auto report = fuse::evaluate(model, ds, data::Split::kTest, cfg.optimizer.batch_size);
            py::dict out;
            out["checkpoint"] = res.checkpoint_path;
            out["best_epoch"] = res.best_epoch;
            out["test_dice"] = report.mean_dice;
            out["test_mae"] = report.mean_mae;
            return out;
        },
        py::arg("config_json"), py::arg("count"), py::arg("out_dir"),
        "Desk-scale pipeline: synthesize phantoms, train, evaluate the test split.");

    m.def("default_config_json", [] { return config_to_json(SymSegConfig{}).dump(2); });
}
