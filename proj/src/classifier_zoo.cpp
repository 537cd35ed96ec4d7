#include "saliprune/classifier_zoo.hpp"

#include <algorithm>
#include <numeric>

#include "saliprune/data_pipeline.hpp"
#include "saliprune/error.hpp"
#include "saliprune/optim.hpp"

namespace saliprune {

namespace {

int conv_out(int size, int kernel, int stride, int pad) {
  return (size + 2 * pad - kernel) / stride + 1;
}

struct BlockGeometry {
  int stage;
  int in;
  int hidden;
  int out;
  int stride;
  int in_size;   // spatial side entering the block
  int out_size;  // spatial side leaving it
};

std::vector<BlockGeometry> block_geometry(const ClassifierSpec& s) {
  std::vector<BlockGeometry> out;
  const auto hidden = s.hidden_widths();
  int channels = s.stem_channels;
  int side = conv_out(s.input_size, 3, s.stem_stride, 1);
  int b = 0;
  for (std::size_t st = 0; st < s.stages.size(); ++st) {
    for (int i = 0; i < s.stages[st].blocks; ++i) {
      const int stride = i == 0 ? s.stages[st].stride : 1;
      const int next_side = conv_out(side, 3, stride, 1);
      out.push_back({static_cast<int>(st), channels, hidden[b], s.stages[st].width, stride, side,
                     next_side});
      channels = s.stages[st].width;
      side = next_side;
      ++b;
    }
  }
  return out;
}

const char* arch_name(Arch a) { return a == Arch::residual ? "residual" : "depthwise_separable"; }

}  // namespace

int ClassifierSpec::block_count() const {
  int n = 0;
  for (const auto& st : stages) n += st.blocks;
  return n;
}

std::vector<int> ClassifierSpec::hidden_widths() const {
  if (!hidden.empty()) return hidden;
  std::vector<int> out;
  int channels = stem_channels;
  for (const auto& st : stages) {
    for (int i = 0; i < st.blocks; ++i) {
      out.push_back(arch == Arch::residual ? st.width : expansion * channels);
      channels = st.width;
    }
  }
  return out;
}

void ClassifierSpec::validate() const {
  auto fail = [](const std::string& m) { throw InvalidParameter("invalid classifier spec: " + m); };
  if (input_size < 1 || in_channels < 1) fail("input must be non-empty");
  if (num_classes < 2) fail("need at least two classes");
  if (stem_channels < 1 || stem_stride < 1) fail("bad stem");
  if (stages.empty()) fail("no stages");
  if (expansion < 1) fail("expansion must be positive");
  for (const auto& st : stages) {
    if (st.width < 1 || st.blocks < 1 || st.stride < 1) fail("bad stage");
  }
  if (!hidden.empty() && static_cast<int>(hidden.size()) != block_count()) {
    fail("hidden widths must list one entry per block");
  }
  for (int h : hidden_widths()) {
    if (h < 1) fail("every block needs at least one hidden channel");
  }
  int side = conv_out(input_size, 3, stem_stride, 1);
  if (side < 1) fail("stem removes the whole input");
  for (const auto& g : block_geometry(*this)) {
    if (g.out_size < 1) fail("spatial size collapses to zero");
  }
}

void to_json(nlohmann::json& j, const ClassifierSpec& s) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : s.stages) {
    stages.push_back({{"width", st.width}, {"blocks", st.blocks}, {"stride", st.stride}});
  }
  j = {{"arch", arch_name(s.arch)},
       {"input_size", s.input_size},
       {"in_channels", s.in_channels},
       {"num_classes", s.num_classes},
       {"stem_channels", s.stem_channels},
       {"stem_stride", s.stem_stride},
       {"stages", stages},
       {"expansion", s.expansion},
       {"hidden", s.hidden}};
}

void from_json(const nlohmann::json& j, ClassifierSpec& s) {
  const std::string arch = j.at("arch").get<std::string>();
  if (arch == "residual") {
    s.arch = Arch::residual;
  } else if (arch == "depthwise_separable") {
    s.arch = Arch::depthwise_separable;
  } else {
    throw ConfigError("unknown architecture '" + arch + "'");
  }
  s.input_size = j.at("input_size").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.stem_channels = j.at("stem_channels").get<int>();
  s.stem_stride = j.value("stem_stride", 1);
  s.stages.clear();
  for (const auto& st : j.at("stages")) {
    s.stages.push_back({st.at("width").get<int>(), st.at("blocks").get<int>(),
                        st.at("stride").get<int>()});
  }
  s.expansion = j.value("expansion", 2);
  s.hidden = j.value("hidden", std::vector<int>{});
}

ClassifierSpec residual_cifar_spec(int blocks_per_stage) {
  ClassifierSpec s;
  s.stem_channels = 16;
  s.stages = {{16, blocks_per_stage, 1}, {32, blocks_per_stage, 2}, {64, blocks_per_stage, 2}};
  return s;
}

ClassifierSpec residual_desk_spec() {
  ClassifierSpec s;
  s.stem_channels = 16;
  s.stem_stride = 2;
  s.stages = {{16, 1, 1}, {32, 1, 2}, {64, 1, 2}};
  return s;
}

ClassifierSpec depthwise_desk_spec() {
  ClassifierSpec s;
  s.arch = Arch::depthwise_separable;
  s.stem_channels = 8;
  s.stem_stride = 2;
  s.expansion = 3;
  s.stages = {{8, 1, 1}, {16, 2, 2}, {32, 2, 2}};
  return s;
}

ClassifierSpec spec_preset(const std::string& name) {
  if (name == "resnet-cifar") return residual_cifar_spec();
  if (name == "resnet-desk") return residual_desk_spec();
  if (name == "mobile-desk") return depthwise_desk_spec();
  throw ConfigError("unknown architecture preset '" + name +
                    "' (expected resnet-cifar, resnet-desk or mobile-desk)");
}

std::vector<LayerRecord> layer_records(const ClassifierSpec& spec) {
  spec.validate();
  std::vector<LayerRecord> out;
  const int stem_side = conv_out(spec.input_size, 3, spec.stem_stride, 1);
  out.push_back({"stem", LayerKind::conv, 3, spec.in_channels, spec.stem_channels,
                 spec.stem_stride, stem_side, stem_side});
  const auto geo = block_geometry(spec);
  for (std::size_t b = 0; b < geo.size(); ++b) {
    const auto& g = geo[b];
    const std::string p = "block" + std::to_string(b);
    const int gate = static_cast<int>(b);
    if (spec.arch == Arch::residual) {
      out.push_back({p + ".conv1", LayerKind::conv, 3, g.in, g.hidden, g.stride, g.out_size,
                     g.out_size, -1, gate});
      out.push_back({p + ".conv2", LayerKind::conv, 3, g.hidden, g.out, 1, g.out_size, g.out_size,
                     gate, -1});
      if (g.stride != 1 || g.in != g.out) {
        out.push_back({p + ".proj", LayerKind::conv, 1, g.in, g.out, g.stride, g.out_size,
                       g.out_size});
      }
    } else {
      out.push_back({p + ".conv1", LayerKind::conv, 1, g.in, g.hidden, 1, g.in_size, g.in_size,
                     -1, gate});
      out.push_back({p + ".dw", LayerKind::depthwise, 3, g.hidden, g.hidden, g.stride, g.out_size,
                     g.out_size, gate, gate});
      out.push_back({p + ".conv2", LayerKind::conv, 1, g.hidden, g.out, 1, g.out_size, g.out_size,
                     gate, -1});
    }
  }
  out.push_back({"fc", LayerKind::fully_connected, 1, spec.stages.back().width, spec.num_classes,
                 1, 1, 1});
  return out;
}

std::vector<GateGroup> gate_groups(const ClassifierSpec& spec) {
  std::vector<GateGroup> out;
  const auto hidden = spec.hidden_widths();
  for (std::size_t b = 0; b < hidden.size(); ++b) {
    out.push_back({"block" + std::to_string(b), hidden[b]});
  }
  return out;
}

std::int64_t flops_of_layer(const LayerRecord& l, int c_in_active, int c_out_active) {
  if (c_in_active < 0 || c_out_active < 0) throw InvalidParameter("negative active channel count");
  if (c_in_active > l.c_in || c_out_active > l.c_out) {
    throw InvalidParameter("active channel count exceeds layer width in " + l.id);
  }
  const std::int64_t area = static_cast<std::int64_t>(l.out_h) * l.out_w;
  const std::int64_t k2 = static_cast<std::int64_t>(l.kernel) * l.kernel;
  switch (l.kind) {
    case LayerKind::conv: return area * k2 * c_in_active * c_out_active;
    case LayerKind::depthwise: return area * k2 * c_out_active;
    case LayerKind::fully_connected: return static_cast<std::int64_t>(c_in_active) * c_out_active;
  }
  return 0;
}

ArchVector ArchVector::ones(const std::vector<GateGroup>& groups) {
  ArchVector v;
  v.hard = true;
  for (const auto& g : groups) v.values.emplace_back(g.size, 1.0);
  return v;
}

std::vector<int> ArchVector::active_counts() const {
  std::vector<int> out;
  for (const auto& g : values) {
    out.push_back(static_cast<int>(std::count_if(g.begin(), g.end(), [](double x) { return x > 0.5; })));
  }
  return out;
}

FlopsModel::FlopsModel(const ClassifierSpec& spec)
    : layers_(layer_records(spec)), groups_(gate_groups(spec)) {
  for (const auto& l : layers_) {
    const std::int64_t f = flops_of_layer(l, l.c_in, l.c_out);
    total_ += f;
    if (l.prunable()) total_prunable_ += f;
  }
}

std::int64_t FlopsModel::prunable_with_counts(std::span<const int> active) const {
  if (active.size() != groups_.size()) throw ShapeMismatch("one active count per gate group");
  std::int64_t total = 0;
  for (const auto& l : layers_) {
    if (!l.prunable()) continue;
    const int in = l.in_gate >= 0 ? active[l.in_gate] : l.c_in;
    const int out = l.out_gate >= 0 ? active[l.out_gate] : l.c_out;
    total += l.kind == LayerKind::depthwise ? flops_of_layer(l, out, out) : flops_of_layer(l, in, out);
  }
  return total;
}

double FlopsModel::current(const ArchVector& v) const {
  if (v.values.size() != groups_.size()) throw ShapeMismatch("one gate vector per gate group");
  std::vector<double> sums;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    if (static_cast<int>(v.values[g].size()) != groups_[g].size) {
      throw ShapeMismatch("gate vector " + groups_[g].id + " has the wrong length");
    }
    sums.push_back(std::accumulate(v.values[g].begin(), v.values[g].end(), 0.0));
  }
  double total = 0;
  for (const auto& l : layers_) {
    if (!l.prunable()) continue;
    const double base = static_cast<double>(flops_of_layer(l, l.c_in, l.c_out));
    // Multiply before dividing: with integer sums the quotient is exact.
    if (l.kind == LayerKind::depthwise) {
      total += base * sums[l.out_gate] / l.c_out;
      continue;
    }
    double num = base;
    double den = 1;
    if (l.in_gate >= 0) {
      num *= sums[l.in_gate];
      den *= l.c_in;
    }
    if (l.out_gate >= 0) {
      num *= sums[l.out_gate];
      den *= l.c_out;
    }
    total += num / den;
  }
  return total;
}

ClassifierNet::ClassifierNet(ClassifierSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  build(rng);
}

ClassifierNet::ClassifierNet(ClassifierSpec spec, const WeightSet& weights)
    : spec_(std::move(spec)) {
  spec_.validate();
  Rng scratch(0);
  build(scratch);
  load(weights);
}

void ClassifierNet::build(Rng& rng) {
  stem_ = Conv2d(spec_.in_channels, spec_.stem_channels, 3, spec_.stem_stride, 1, false, rng);
  stem_bn_ = BatchNorm2d(spec_.stem_channels);
  for (const auto& g : block_geometry(spec_)) {
    Block b;
    b.stage = g.stage;
    if (spec_.arch == Arch::residual) {
      b.conv1 = Conv2d(g.in, g.hidden, 3, g.stride, 1, false, rng);
      b.bn1 = BatchNorm2d(g.hidden);
      b.conv2 = Conv2d(g.hidden, g.out, 3, 1, 1, false, rng);
      b.bn2 = BatchNorm2d(g.out);
      b.has_projection = g.stride != 1 || g.in != g.out;
      if (b.has_projection) {
        b.proj = Conv2d(g.in, g.out, 1, g.stride, 0, false, rng);
        b.proj_bn = BatchNorm2d(g.out);
      }
      b.identity_residual = !b.has_projection;
    } else {
      b.conv1 = Conv2d(g.in, g.hidden, 1, 1, 0, false, rng);
      b.bn1 = BatchNorm2d(g.hidden);
      b.dw = DepthwiseConv2d(g.hidden, 3, g.stride, 1, rng);
      b.bn_mid = BatchNorm2d(g.hidden);
      b.conv2 = Conv2d(g.hidden, g.out, 1, 1, 0, false, rng);
      b.bn2 = BatchNorm2d(g.out);
      b.identity_residual = g.stride == 1 && g.in == g.out;
    }
    blocks_.push_back(std::move(b));
  }
  fc_ = Linear(spec_.stages.back().width, spec_.num_classes, rng);
}

ForwardResult ClassifierNet::forward(const Var& x, bool training, std::span<const Var> gates) {
  if (!gates.empty() && gates.size() != blocks_.size()) {
    throw ShapeMismatch("expected " + std::to_string(blocks_.size()) + " gate vectors, got " +
                        std::to_string(gates.size()));
  }
  if (x.value().rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.input_size ||
      x.dim(3) != spec_.input_size) {
    throw ShapeMismatch("classifier input " + x.value().shape_string() + " does not match spec");
  }
  ForwardResult r;
  Var h = ops::relu(stem_bn_.forward(stem_.forward(x), training));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    Var t = ops::relu(b.bn1.forward(b.conv1.forward(h), training));
    if (!gates.empty()) t = ops::channel_gate(t, gates[i]);
    if (spec_.arch == Arch::depthwise_separable) {
      t = ops::relu(b.bn_mid.forward(b.dw.forward(t), training));
      if (!gates.empty()) t = ops::channel_gate(t, gates[i]);
      t = b.bn2.forward(b.conv2.forward(t), training);
      h = b.identity_residual ? ops::add(t, h) : t;
    } else {
      t = b.bn2.forward(b.conv2.forward(t), training);
      Var shortcut = b.has_projection ? b.proj_bn.forward(b.proj.forward(h), training) : h;
      h = ops::relu(ops::add(t, shortcut));
    }
    if (i + 1 == blocks_.size() || blocks_[i + 1].stage != b.stage) r.scales.push_back(h);
  }
  r.logits = fc_.forward(ops::global_avg_pool(h));
  return r;
}

StateList ClassifierNet::state() {
  StateList s;
  stem_.collect("stem", s);
  stem_bn_.collect("stem_bn", s);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    b.conv1.collect(p + "conv1", s);
    b.bn1.collect(p + "bn1", s);
    if (spec_.arch == Arch::depthwise_separable) {
      b.dw.collect(p + "dw", s);
      b.bn_mid.collect(p + "bn_mid", s);
    }
    b.conv2.collect(p + "conv2", s);
    b.bn2.collect(p + "bn2", s);
    if (b.has_projection) {
      b.proj.collect(p + "proj", s);
      b.proj_bn.collect(p + "proj_bn", s);
    }
  }
  fc_.collect("fc", s);
  return s;
}

WeightSet ClassifierNet::weights() { return export_state(state()); }
void ClassifierNet::load(const WeightSet& weights) { import_state(state(), weights); }
std::vector<Var> ClassifierNet::parameters() { return trainable_vars(state()); }
void ClassifierNet::set_trainable(bool trainable) { saliprune::set_trainable(state(), trainable); }
std::string ClassifierNet::checksum() { return saliprune::checksum(weights()); }

WeightSet build_classifier(const ClassifierSpec& spec, Rng& rng) {
  return ClassifierNet(spec, rng).weights();
}

void to_json(nlohmann::json& j, const ClassifierTrainConfig& c) {
  j = {{"epochs", c.epochs},   {"batch_size", c.batch_size},     {"lr", c.lr},
       {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"augment", c.augment},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ClassifierTrainConfig& c) {
  ClassifierTrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.augment = j.value("augment", d.augment);
  c.seed = j.value("seed", d.seed);
}

std::vector<Var> gate_vars(const ArchVector& v) {
  std::vector<Var> out;
  for (const auto& g : v.values) {
    Tensor t({static_cast<int>(g.size())});
    for (std::size_t i = 0; i < g.size(); ++i) t[i] = static_cast<Real>(g[i]);
    out.emplace_back(std::move(t));
  }
  return out;
}

double evaluate(ClassifierNet& net, const Dataset& data, std::span<const int> indices,
                const std::optional<ArchVector>& gates, int batch_size) {
  if (indices.empty()) return 0.0;
  NoGradGuard no_grad;
  const std::vector<Var> g = gates ? gate_vars(*gates) : std::vector<Var>{};
  long correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto ids = indices.subspan(start, std::min<std::size_t>(batch_size, indices.size() - start));
    const auto r = net.forward(Var(data.batch(ids)), false, g);
    const auto pred = ops::argmax_rows(r.logits.value());
    for (std::size_t i = 0; i < ids.size(); ++i) correct += pred[i] == data.labels[ids[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

ClassifierTrainResult train_classifier(ClassifierNet& net, const Dataset& data,
                                       const ClassifierTrainConfig& config) {
  if (config.epochs < 0 || config.batch_size < 2) {
    throw InvalidParameter("classifier training needs epochs >= 0 and batch size >= 2");
  }
  ClassifierTrainResult result;
  result.weights = net.weights();
  result.best_val_accuracy = -1;
  std::vector<int> train = data.indices(SplitTag::train);
  const std::vector<int> val = data.indices(SplitTag::val);
  if (config.epochs > 0 && train.size() < 2) throw InvalidParameter("too few training samples");

  net.set_trainable(true);
  Sgd opt(net.parameters(), {config.lr, config.momentum, config.weight_decay});
  Rng shuffle_rng = Rng(config.seed).substream(0xC1A5);
  Rng augment_rng = Rng(config.seed).substream(0xA06);
  const long steps_per_epoch = static_cast<long>(train.size()) / config.batch_size +
                               (train.size() % config.batch_size >= 2 ? 1 : 0);
  const long total_steps = steps_per_epoch * config.epochs;
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (int i = static_cast<int>(train.size()) - 1; i > 0; --i) {
      std::swap(train[i], train[shuffle_rng.below(static_cast<std::uint64_t>(i) + 1)]);
    }
    double loss_sum = 0;
    long correct = 0, seen = 0;
    for (std::size_t start = 0; start < train.size(); start += config.batch_size) {
      const std::size_t len = std::min<std::size_t>(config.batch_size, train.size() - start);
      if (len < 2) break;
      const std::span<const int> ids(train.data() + start, len);
      opt.set_lr(cosine_lr(config.lr, step++, total_steps));
      opt.zero_grad();
      const auto labels = data.batch_labels(ids);
      const auto r = net.forward(Var(data.batch(ids, config.augment ? &augment_rng : nullptr)), true);
      Var loss = ops::cross_entropy(r.logits, labels);
      backward(loss);
      opt.step();
      const double l = loss.value()[0];
      if (!std::isfinite(l)) throw NumericError("classifier loss became non-finite");
      loss_sum += l * len;
      const auto pred = ops::argmax_rows(r.logits.value());
      for (std::size_t k = 0; k < len; ++k) correct += pred[k] == labels[k];
      seen += static_cast<long>(len);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / std::max<long>(seen, 1);
    rec.train_accuracy = static_cast<double>(correct) / std::max<long>(seen, 1);
    rec.val_accuracy = evaluate(net, data, val);
    result.curve.push_back(rec);
    if (rec.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = rec.val_accuracy;
      result.weights = net.weights();
    }
  }
  if (result.best_val_accuracy < 0) result.best_val_accuracy = evaluate(net, data, val);
  net.load(result.weights);
  return result;
}

}  // namespace saliprune
