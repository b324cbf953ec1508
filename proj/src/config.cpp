#include "vsyn/config.hpp"

#include <fstream>
#include <sstream>

namespace vsyn {

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const char* ws = " \t\r";
            s.erase(0, s.find_first_not_of(ws));
            auto end = s.find_last_not_of(ws);
            s.erase(end == std::string::npos ? 0 : end + 1);
            return s;
        };
        std::string key = trim(line.substr(0, eq));
        if (!key.empty()) kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), "cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_kv_text(ss.str());
}

std::string TrainConfig::serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "dataset=" << dataset << "\n";
    os << "out_dir=" << out_dir << "\n";
    os << "batch_size=" << batch_size << "\n";
    os << "total_steps=" << total_steps << "\n";
    os << "seed=" << seed << "\n";
    os << "lr_eg=" << adam_eg.lr << "\nlr_d=" << adam_d.lr << "\nlr_dac=" << adam_dac.lr << "\n";
    os << "beta1=" << adam_eg.beta1 << "\nbeta2=" << adam_eg.beta2 << "\n";
    os << "adam_eps=" << adam_eg.eps << "\n";
    os << "alpha_content=" << weights.content << "\nalpha_pixel=" << weights.pixel << "\n";
    os << "alpha_kl=" << weights.kl << "\nalpha_rough=" << weights.rough << "\n";
    os << "tau=" << model.tau << "\n";
    os << "num_views=" << model.num_views << "\n";
    os << "image_size=" << model.image_size << "\n";
    os << "resid_hidden=" << model.resid_hidden << "\n";
    os << "iterative=" << (model.iterative ? 1 : 0) << "\n";
    os << "model_seed=" << model.seed << "\n";
    os << "checkpoint_interval=" << checkpoint_interval << "\n";
    os << "metrics_interval=" << metrics_interval << "\n";
    os << "threads=" << threads << "\n";
    return os.str();
}

void TrainConfig::apply(const std::string& key, const std::string& value) {
    if (key == "dataset") dataset = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "batch_size") batch_size = std::stoi(value);
    else if (key == "total_steps") total_steps = std::stoll(value);
    else if (key == "seed") { seed = std::stoull(value); model.seed = seed; }
    else if (key == "lr_eg") adam_eg.lr = std::stod(value);
    else if (key == "lr_d") adam_d.lr = std::stod(value);
    else if (key == "lr_dac") adam_dac.lr = std::stod(value);
    else if (key == "beta1") adam_eg.beta1 = adam_d.beta1 = adam_dac.beta1 = std::stod(value);
    else if (key == "beta2") adam_eg.beta2 = adam_d.beta2 = adam_dac.beta2 = std::stod(value);
    else if (key == "adam_eps") adam_eg.eps = adam_d.eps = adam_dac.eps = std::stod(value);
    else if (key == "alpha_content") weights.content = std::stod(value);
    else if (key == "alpha_pixel") weights.pixel = std::stod(value);
    else if (key == "alpha_kl") weights.kl = std::stod(value);
    else if (key == "alpha_rough") weights.rough = std::stod(value);
    else if (key == "tau") model.tau = std::stod(value);
    else if (key == "num_views") model.num_views = std::stoi(value);
    else if (key == "image_size") model.image_size = std::stoll(value);
    else if (key == "resid_hidden") model.resid_hidden = std::stoll(value);
    else if (key == "iterative") model.iterative = (value == "1" || value == "true");
    else if (key == "model_seed") model.seed = std::stoull(value);
    else if (key == "checkpoint_interval") checkpoint_interval = std::stoll(value);
    else if (key == "metrics_interval") metrics_interval = std::stoll(value);
    else if (key == "threads") threads = std::stoi(value);
    else fail("unknown config key: " + key);
}

TrainConfig TrainConfig::deserialize(const std::string& text) {
    TrainConfig cfg;
    for (const auto& [k, v] : parse_kv_text(text)) cfg.apply(k, v);
    return cfg;
}

}  // namespace vsyn
