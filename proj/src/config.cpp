#include "tpm/config.hpp"

#include <json.hpp>

#include "tpm/binary_io.hpp"
#include "tpm/error.hpp"

namespace tpm {

void TrainConfig::validate() const {
  model.validate();
  optimizer.validate();
  if (masks.size() < 2) throw ParameterError("config needs at least two mask ratios");
  if (epochs == 0) throw ParameterError("epochs must be positive");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  if (!(svm_c > 0.0)) throw ParameterError("svm_c must be positive");
  for (const HeadConfig* h : {&finetune, &fewshot}) {
    if (h->epochs == 0 || h->batch_size == 0 || h->hidden == 0) {
      throw ParameterError("head epochs, batch size and hidden width must be positive");
    }
    if (!(h->learning_rate > 0.0) || !(h->weight_decay >= 0.0)) {
      throw ParameterError("head learning rate must be positive and weight decay nonnegative");
    }
  }
  for (double m : masks.ratios()) {
    const auto hidden = masked_count(model.patch_count, m);
    if (hidden == 0 || hidden == model.patch_count) {
      throw ParameterError("mask ratio " + std::to_string(m) + " hides no patch or every patch");
    }
  }
}

namespace {

using Json = nlohmann::ordered_json;

void put_head(Json& j, const std::string& prefix, const HeadConfig& h) {
  j[prefix + "_epochs"] = h.epochs;
  j[prefix + "_batch_size"] = h.batch_size;
  j[prefix + "_hidden"] = h.hidden;
  j[prefix + "_learning_rate"] = h.learning_rate;
  j[prefix + "_weight_decay"] = h.weight_decay;
}

}  // namespace

std::string config_to_json(const TrainConfig& c) {
  Json j;
  j["n_points"] = c.model.n_points;
  j["patch_count"] = c.model.patch_count;
  j["patch_size"] = c.model.patch_size;
  j["embed_dim"] = c.model.embed_dim;
  j["encoder_depth"] = c.model.encoder_depth;
  j["decoder_depth"] = c.model.decoder_depth;
  j["head_count"] = c.model.head_count;
  j["mlp_ratio"] = c.model.mlp_ratio;
  j["base_mask"] = c.model.base_mask;
  j["masks"] = c.masks.to_string();
  j["lambda_mode"] = to_string(c.lambda_mode);
  j["full_cloud"] = c.full_cloud;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["learning_rate"] = c.optimizer.learning_rate;
  j["min_learning_rate"] = c.optimizer.min_learning_rate;
  j["weight_decay"] = c.optimizer.weight_decay;
  j["beta1"] = c.optimizer.beta1;
  j["beta2"] = c.optimizer.beta2;
  j["epsilon"] = c.optimizer.epsilon;
  j["warmup_fraction"] = c.optimizer.warmup_fraction;
  j["svm_c"] = c.svm_c;
  put_head(j, "finetune", c.finetune);
  put_head(j, "fewshot", c.fewshot);
  return j.dump(2) + "\n";
}

TrainConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("config must be a JSON object");

  TrainConfig c;
  bool masks_given = false;
  auto size = [](const nlohmann::json& v) -> std::size_t {
    if (!v.is_number_unsigned()) throw ParseError("expected a nonnegative integer");
    return v.get<std::size_t>();
  };
  auto real = [](const nlohmann::json& v) -> double {
    if (!v.is_number()) throw ParseError("expected a number");
    return v.get<double>();
  };
  auto text_of = [](const nlohmann::json& v) -> std::string {
    if (!v.is_string()) throw ParseError("expected a string");
    return v.get<std::string>();
  };
  auto head = [&](HeadConfig& h, const std::string& field, const nlohmann::json& v) {
    if (field == "epochs") h.epochs = size(v);
    else if (field == "batch_size") h.batch_size = size(v);
    else if (field == "hidden") h.hidden = size(v);
    else if (field == "learning_rate") h.learning_rate = real(v);
    else if (field == "weight_decay") h.weight_decay = real(v);
    else return false;
    return true;
  };

  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "n_points") c.model.n_points = size(v);
      else if (key == "patch_count") c.model.patch_count = size(v);
      else if (key == "patch_size") c.model.patch_size = size(v);
      else if (key == "embed_dim") c.model.embed_dim = size(v);
      else if (key == "encoder_depth") c.model.encoder_depth = size(v);
      else if (key == "decoder_depth") c.model.decoder_depth = size(v);
      else if (key == "head_count") c.model.head_count = size(v);
      else if (key == "mlp_ratio") c.model.mlp_ratio = size(v);
      else if (key == "base_mask") c.model.base_mask = real(v);
      else if (key == "masks") {
        c.masks = parse_mask_construction(text_of(v));
        masks_given = true;
      } else if (key == "lambda_mode") c.lambda_mode = parse_lambda_mode(text_of(v));
      else if (key == "full_cloud") {
        if (!v.is_boolean()) throw ParseError("expected true or false");
        c.full_cloud = v.get<bool>();
      } else if (key == "epochs") c.epochs = size(v);
      else if (key == "batch_size") c.batch_size = size(v);
      else if (key == "seed") c.seed = size(v);
      else if (key == "learning_rate") c.optimizer.learning_rate = real(v);
      else if (key == "min_learning_rate") c.optimizer.min_learning_rate = real(v);
      else if (key == "weight_decay") c.optimizer.weight_decay = real(v);
      else if (key == "beta1") c.optimizer.beta1 = real(v);
      else if (key == "beta2") c.optimizer.beta2 = real(v);
      else if (key == "epsilon") c.optimizer.epsilon = real(v);
      else if (key == "warmup_fraction") c.optimizer.warmup_fraction = real(v);
      else if (key == "svm_c") c.svm_c = real(v);
      else if (key.rfind("finetune_", 0) == 0 && head(c.finetune, key.substr(9), v)) {
      } else if (key.rfind("fewshot_", 0) == 0 && head(c.fewshot, key.substr(8), v)) {
      } else {
        throw ParseError("unknown key");
      }
    } catch (const ParseError& e) {
      throw ParseError("config key '" + key + "': " + e.what());
    }
  }
  if (!masks_given) {
    try {
      c.masks = derive_mask_triple(c.model.base_mask);
    } catch (const ParameterError& e) {
      throw ParseError(std::string("config key 'base_mask': ") + e.what());
    }
  }
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  return config_from_json(io::read_file(path.string()));
}

}  // namespace tpm
