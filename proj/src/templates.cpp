#include "watt/templates.hpp"

#include <stdexcept>

namespace watt {

namespace {

void require_slot(std::string_view tmpl) {
  const auto first = tmpl.find("{}");
  if (first == std::string_view::npos || tmpl.find("{}", first + 2) != std::string_view::npos) {
    throw std::invalid_argument("template \"" + std::string(tmpl) + "\" must contain exactly one {} slot");
  }
}

}  // namespace

TemplateSet::TemplateSet(std::vector<std::string> templates) : templates_(std::move(templates)) {
  if (templates_.empty()) throw std::invalid_argument("TemplateSet: at least one template is required");
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    require_slot(templates_[i]);
    for (std::size_t j = 0; j < i; ++j) {
      if (templates_[i] == templates_[j]) throw std::invalid_argument("TemplateSet: duplicate template \"" + templates_[i] + "\"");
    }
  }
}

TemplateSet TemplateSet::defaults() {
  return TemplateSet({"a photo of a {}", "itap of a {}", "a bad photo of the {}", "a origami {}",
                      "a photo of the large {}", "a {} in a video game", "art of the {}", "a photo of the small {}"});
}

std::string format_prompt(std::string_view tmpl, std::string_view class_name) {
  require_slot(tmpl);
  const auto pos = tmpl.find("{}");
  std::string out(tmpl.substr(0, pos));
  out += class_name;
  out += tmpl.substr(pos + 2);
  return out;
}

std::vector<std::string> class_prompts(std::string_view tmpl, const std::vector<std::string>& class_names) {
  std::vector<std::string> out;
  out.reserve(class_names.size());
  for (const auto& c : class_names) out.push_back(format_prompt(tmpl, c));
  return out;
}

}  // namespace watt
