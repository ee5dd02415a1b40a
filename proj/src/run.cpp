#include "eres/run.hpp"

#include <cstdio>
#include <fcntl.h>
#include <fstream>
#include <ostream>
#include <sstream>
#include <unistd.h>

namespace eres {

RunLock::RunLock(const std::filesystem::path& dir) : file_(dir / ".lock") {
  const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw IoError("run directory " + dir.string() + " is locked by another process (remove " +
                  file_.string() + " if it is stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  (void)!::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(file_, ec);
}

CifarSplit load_run_data(const RunConfig& cfg) {
  if (!cfg.data.synthetic()) {
    CifarSplit s = load_cifar10(cfg.data.source, cfg.data.train_subset, cfg.data.val_subset);
    if (cfg.net.in_channels != 3 || cfg.net.image_size != kCifarSide) {
      throw ConfigError("CIFAR-10 needs in_channels = 3 and image_size = 32");
    }
    return s;
  }
  SyntheticSpec spec;
  spec.kind = cfg.data.synthetic_kind();
  spec.classes = cfg.net.classes;
  spec.channels = cfg.net.in_channels;
  spec.image_size = cfg.net.image_size;
  const std::size_t n_train = cfg.data.synthetic_train;
  const std::size_t n_val = cfg.data.synthetic_val;
  Dataset all = synthetic_dataset(spec, n_train + n_val, cfg.train.seed);
  if (all.classes > cfg.net.classes) throw ConfigError("network has fewer classes than the dataset");
  CifarSplit s;
  s.train = all.head(n_train);
  if (n_val > 0) {
    const std::size_t per = all.images.size() / all.size();
    Shape shape = all.images.shape();
    shape[0] = n_val;
    s.test.images = Tensor<float>(shape, std::vector<float>(all.images.ptr() + n_train * per,
                                                            all.images.ptr() + (n_train + n_val) * per));
    s.test.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(n_train), all.labels.end());
    s.test.classes = all.classes;
  }
  s.train.classes = all.classes;
  s.stats = channel_stats(s.train);
  normalize(s.train, s.stats);
  if (n_val > 0) normalize(s.test, s.stats);
  return s;
}

namespace {

// Keeps the metrics rows of epochs before `next_epoch`.
void truncate_metrics(const std::filesystem::path& file, int next_epoch) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::string kept;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    if (std::stoi(line.substr(0, line.find(','))) < next_epoch) kept += line + "\n";
  }
  in.close();
  std::ofstream out(file, std::ios::trunc);
  out << kept;
  if (!out) throw IoError("cannot rewrite " + file.string());
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + file.string());
}

}  // namespace

template <typename T>
RunSummary run_training(const RunConfig& cfg_in, const CifarSplit& data, bool resume,
                        std::ostream* progress) {
  RunConfig cfg = cfg_in;
  cfg.dtype = sizeof(T) == 4 ? "f32" : "f64";
  cfg.resolve();
  const std::filesystem::path dir = cfg.out;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  RunLock lock(dir);

  const auto ckpt_path = dir / kCheckpointFile;
  const auto metrics_path = dir / kMetricsFile;

  std::optional<Restored<T>> restored;
  if (resume) {
    restored = load_checkpoint<T>(ckpt_path);
    // The stored state wins for everything that shapes the model; the epoch
    // budget may be extended.
    const int epochs = cfg.train.epochs;
    cfg = restored->config;
    cfg.train.epochs = epochs;
    cfg.out = dir.string();
    cfg.dtype = sizeof(T) == 4 ? "f32" : "f64";
    cfg.resolve();
  }
  write_text(dir / kResolvedConfigFile, cfg.to_text());

  Model<T> model = restored ? std::move(restored->model) : Model<T>::build(cfg.net, cfg.train.seed);
  Trainer<T> trainer(model, cfg.train);
  if (restored) {
    trainer.resume(restored->state.next_epoch, restored->state.lr, std::move(restored->velocity));
    truncate_metrics(metrics_path, restored->state.next_epoch);
  } else {
    write_text(metrics_path, std::string(kMetricsHeader) + "\n");
  }

  RunSummary summary;
  auto on_epoch = [&](const EpochLog& log) {
    std::vector<BlockSpec> specs;
    for (const auto& b : model.blocks()) specs.push_back(b.spec);
    std::ostringstream rows;
    write_metrics(rows, log, specs);
    std::ofstream out(metrics_path, std::ios::app);
    out << rows.str();
    if (!out) throw IoError("cannot append to " + metrics_path.string());
    out.close();

    RunState state{trainer.next_epoch(), trainer.lr_policy(), data.stats};
    save_checkpoint(model, cfg, state, ckpt_path, &trainer.sgd().velocity);

    summary.epochs = log.epoch + 1;
    summary.val_error = log.val_error;
    summary.discard_ratio = log.discard_ratio;
    summary.train_loss = log.train_loss;
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %d  loss %.4f  val_error %.4f  lr %g  discard %.3f\n",
                    log.epoch, log.train_loss, log.val_error, log.lr, log.discard_ratio);
      *progress << buf << std::flush;
    }
  };
  const Dataset* val = data.test.size() > 0 ? &data.test : nullptr;
  train(trainer, data.train, val, on_epoch);
  if (summary.epochs == 0) {
    // Nothing left to train; still leave a checkpoint of the current state.
    RunState state{trainer.next_epoch(), trainer.lr_policy(), data.stats};
    save_checkpoint(model, cfg, state, ckpt_path, &trainer.sgd().velocity);
    summary.epochs = trainer.next_epoch();
    summary.discard_ratio = discard_ratio(model);
    if (val) summary.val_error = evaluate(model, *val, cfg.train.eval_batch);
  }
  return summary;
}

template RunSummary run_training<float>(const RunConfig&, const CifarSplit&, bool, std::ostream*);
template RunSummary run_training<double>(const RunConfig&, const CifarSplit&, bool, std::ostream*);

}  // namespace eres
