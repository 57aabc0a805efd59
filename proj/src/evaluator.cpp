#include "clipforge/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clipforge/error.hpp"

namespace clipforge::evaluator {

using nlohmann::json;

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) {
    throw Error(Errc::length_mismatch, std::to_string(predicted.size()) + " predictions vs " +
                                           std::to_string(truth.size()) + " labels");
  }
  if (predicted.empty()) throw Error(Errc::empty_matrix, "no samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if ((p != 0 && p != 1) || (t != 0 && t != 1)) {
      throw Error(Errc::bad_label, "labels must be 0 or 1 (index " + std::to_string(i) + ")");
    }
    if (p == 1) {
      (t == 1 ? cm.tp : cm.fp) += 1;
    } else {
      (t == 0 ? cm.tn : cm.fn) += 1;
    }
  }
  return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm) {
  if (cm.tp < 0 || cm.fp < 0 || cm.tn < 0 || cm.fn < 0) {
    throw Error(Errc::invalid_argument, "confusion counts must be nonnegative");
  }
  if (cm.total() == 0) throw Error(Errc::empty_matrix, "all counts are zero");
  MetricsReport r;
  auto ratio = [](long num, long den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  r.sensitivity = ratio(cm.tp, cm.tp + cm.fn, r.sensitivity_undefined);
  r.specificity = ratio(cm.tn, cm.tn + cm.fp, r.specificity_undefined);
  r.precision = ratio(cm.tp, cm.tp + cm.fp, r.precision_undefined);
  r.accuracy = static_cast<double>(cm.tn + cm.tp) /
               static_cast<double>(cm.tn + cm.tp + cm.fn + cm.fp);
  const double denom = r.precision + r.sensitivity;
  r.f1_undefined = denom == 0.0;
  r.f1 = r.f1_undefined ? 0.0 : 2.0 * (r.precision * r.sensitivity / denom);
  return r;
}

Evaluation evaluate_model(const nn::ModelConfig& model, const nn::ModelParams& params,
                          const dataset::LabeledClips& test) {
  if (test.clips.empty()) throw Error(Errc::empty_split, "test split is empty");
  const auto scored = trainer::score_split(model, params, test);
  Evaluation e;
  e.probs = scored.probs;
  for (const auto& p : e.probs) e.predicted.push_back(nn::argmax<double>(p));
  e.cm = confusion(e.predicted, test.labels);
  e.report = metrics(e.cm);
  e.report.loss = scored.loss;
  return e;
}

json to_json(const ConfusionMatrix& cm) {
  return json{{"TP", cm.tp}, {"FP", cm.fp}, {"TN", cm.tn}, {"FN", cm.fn}};
}

json to_json(const MetricsReport& r) {
  return json{{"sensitivity", r.sensitivity},
              {"specificity", r.specificity},
              {"accuracy", r.accuracy},
              {"precision", r.precision},
              {"f1", r.f1},
              {"loss", r.loss},
              {"undefined",
               {{"sensitivity", r.sensitivity_undefined},
                {"specificity", r.specificity_undefined},
                {"precision", r.precision_undefined},
                {"f1", r.f1_undefined}}}};
}

std::string format_confusion(const ConfusionMatrix& cm) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%-24s%14s%14s\n"
                "%-24s%14ld%14ld\n"
                "%-24s%14ld%14ld\n",
                "actual \\ predicted", "NonViolence", "Violence",  //
                "NonViolence", cm.tn, cm.fp,                       //
                "Violence", cm.fn, cm.tp);
  return buf;
}

namespace {

std::string svg_chart(const std::string& title, const std::vector<double>& a, const std::string& a_name,
                      const std::vector<double>& b, const std::string& b_name) {
  const double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  double lo = 0, hi = 1e-12;
  for (double v : a) hi = std::max(hi, v);
  for (double v : b) hi = std::max(hi, v);
  const auto n = a.size();
  auto x = [&](std::size_t i) { return L + (n > 1 ? (W - L - R) * i / (n - 1.0) : 0.0); };
  auto y = [&](double v) { return H - B - (H - T - B) * (v - lo) / (hi - lo); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">"
    << title << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n"
    << "<text x=\"" << L - 6 << "\" y=\"" << y(hi) + 4
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << hi << "</text>\n"
    << "<text x=\"" << L - 6 << "\" y=\"" << y(lo) + 4
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << lo << "</text>\n";
  auto line = [&](const std::vector<double>& v, const char* color) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < v.size(); ++i) s << x(i) << ',' << y(v[i]) << ' ';
    s << "\"/>\n";
  };
  line(a, "#1f77b4");
  line(b, "#d62728");
  s << "<text x=\"" << W - R - 150 << "\" y=\"" << T + 10
    << "\" fill=\"#1f77b4\" font-family=\"sans-serif\" font-size=\"12\">" << a_name << "</text>\n"
    << "<text x=\"" << W - R - 150 << "\" y=\"" << T + 26
    << "\" fill=\"#d62728\" font-family=\"sans-serif\" font-size=\"12\">" << b_name << "</text>\n"
    << "</svg>\n";
  return s.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw Error(Errc::io_error, "cannot write " + path.string());
}

}  // namespace

CurveFiles export_curves(const trainer::TrainHistory& history, const std::filesystem::path& out_dir,
                         bool plots) {
  if (history.records.empty()) throw Error(Errc::empty_history, "no epochs recorded");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(Errc::io_error, "cannot create " + out_dir.string() + ": " + ec.message());
  CurveFiles files{out_dir / "history.csv", out_dir / "history.json", {}};
  trainer::write_history_csv(history, files.csv);
  write_text(files.json, trainer::to_json(history).dump(2) + "\n");
  if (plots) {
    std::vector<double> loss, val_loss, acc, val_acc;
    for (const auto& r : history.records) {
      loss.push_back(r.loss);
      val_loss.push_back(r.val_loss);
      acc.push_back(r.accuracy);
      val_acc.push_back(r.val_accuracy);
    }
    files.plots = {out_dir / "loss.svg", out_dir / "accuracy.svg"};
    write_text(files.plots[0], svg_chart("Loss", loss, "training", val_loss, "validation"));
    write_text(files.plots[1], svg_chart("Accuracy", acc, "training", val_acc, "validation"));
  }
  return files;
}

}  // namespace clipforge::evaluator
